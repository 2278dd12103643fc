import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrprobe import audio
from asrprobe.errors import (ConfigError, DegenerateSignalError, FormatError,
                             UnsupportedEncodingError)


class TestWaveform:
    def test_rejects_2d(self):
        with pytest.raises(ConfigError):
            audio.Waveform(np.zeros((2, 3)), 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ConfigError):
            audio.Waveform(np.zeros(4), 0)

    def test_duration(self):
        w = audio.Waveform(np.zeros(16000), 16000)
        assert w.duration_s == 1.0


class TestWavIO:
    def test_round_trip_within_quantization_bound(self, tmp_path, rng):
        # [DERIVED] |round(32767 x)/32768 - x| <= (0.5 + |x|)/32768 <= 1.5 LSB
        x = rng.uniform(-0.9, 0.9, size=1000)
        w = audio.Waveform(x, 16000)
        path = tmp_path / "t.wav"
        audio.write_wav(w, path)
        back = audio.read_wav(path)
        assert back.sample_rate_hz == 16000
        assert np.max(np.abs(back.samples - x)) <= 1.5 / 32768 + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-2.0, 2.0, allow_nan=False), min_size=1, max_size=64))
    def test_round_trip_quantization_model(self, tmp_path_factory, vals):
        # [DERIVED] stored value is round(clip(x) * 32767) / 32768 exactly
        x = np.array(vals)
        path = tmp_path_factory.mktemp("wav") / "g.wav"
        audio.write_wav(audio.Waveform(x, 8000), path)
        back = audio.read_wav(path)
        expect = np.round(np.clip(x, -1, 1) * 32767) / 32768.0
        assert np.max(np.abs(back.samples - expect)) < 1e-12

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"NOTAWAVFILE")
        with pytest.raises(FormatError):
            audio.read_wav(p)

    def test_unsupported_encoding(self, tmp_path, rng):
        p = tmp_path / "t.wav"
        audio.write_wav(audio.Waveform(rng.uniform(-1, 1, 100), 16000), p)
        raw = bytearray(p.read_bytes())
        raw[20:22] = (7).to_bytes(2, "little")  # mu-law format code
        p.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedEncodingError):
            audio.read_wav(p)

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "t.wav"
        audio.write_wav(audio.Waveform(rng.uniform(-1, 1, 100), 16000), p)
        p.write_bytes(p.read_bytes()[:30])
        with pytest.raises(FormatError):
            audio.read_wav(p)


class TestResample:
    def test_length(self):
        w = audio.Waveform(np.zeros(16000), 16000)
        assert len(audio.resample(w, 8000)) == 8000

    def test_sine_preserved(self):
        # [DERIVED] a 440 Hz tone is far below both Nyquist rates
        t = np.arange(16000) / 16000
        w = audio.Waveform(0.5 * np.sin(2 * np.pi * 440 * t), 16000)
        y = audio.resample(w, 8000)
        t2 = np.arange(8000) / 8000
        ref = 0.5 * np.sin(2 * np.pi * 440 * t2)
        core = slice(100, -100)  # ignore filter edge effects
        corr = np.corrcoef(y.samples[core], ref[core])[0, 1]
        assert corr > 0.9999

    def test_identity_rate(self):
        w = audio.Waveform(np.arange(100) / 100.0, 16000)
        y = audio.resample(w, 16000)
        assert np.allclose(y.samples, w.samples)


class TestSnrMixing:
    def test_exact_snr(self, rng):
        # [DERIVED] acceptance-style exactness: measured == requested
        for snr_db in (-5.0, 0.0, 10.0, 20.0):
            s = audio.Waveform(rng.standard_normal(8000) * 0.1, 16000)
            n = audio.Waveform(rng.standard_normal(8000) * 0.3, 16000)
            mixed = audio.mix_at_snr(s, n, snr_db)
            noise_part = mixed.samples - s.samples
            measured = 20 * np.log10(audio.rms(s.samples) / audio.rms(noise_part))
            assert abs(measured - snr_db) < 1e-9

    def test_short_noise_tiled(self, rng):
        s = audio.Waveform(rng.standard_normal(8000) * 0.1, 16000)
        n = audio.Waveform(rng.standard_normal(500) * 0.3, 16000)
        mixed = audio.mix_at_snr(s, n, 10.0)
        assert len(mixed) == len(s)

    def test_zero_noise_rejected(self, rng):
        s = audio.Waveform(rng.standard_normal(100), 16000)
        with pytest.raises(DegenerateSignalError):
            audio.mix_at_snr(s, audio.Waveform(np.zeros(100), 16000), 0.0)

    def test_rate_mismatch(self, rng):
        s = audio.Waveform(rng.standard_normal(100), 16000)
        n = audio.Waveform(rng.standard_normal(100), 8000)
        with pytest.raises(ConfigError):
            audio.mix_at_snr(s, n, 0.0)


class TestCorpus:
    def test_deterministic(self):
        spec = audio.CorpusSpec(vocab=["x", "y"], n_speakers=2,
                                utterances_per_speaker=2,
                                tokens_per_utterance=2, seed=5)
        a = audio.synth_corpus(spec)
        b = audio.synth_corpus(spec)
        for ia, ib in zip(a, b):
            assert np.array_equal(ia.waveform.samples, ib.waveform.samples)
            assert ia.transcript == ib.transcript

    def test_ids_and_counts(self, small_corpus):
        assert len(small_corpus) == 12
        assert small_corpus[0].utterance_id == "spk00_utt000"
        assert small_corpus[0].speaker_id == "spk00"

    def test_speakers_differ(self, small_corpus):
        # same utterance slot, different speaker -> different audio
        a = small_corpus[0].waveform.samples
        b = small_corpus[4].waveform.samples
        n = min(a.size, b.size)
        assert not np.allclose(a[:n], b[:n])

    def test_save_load_round_trip(self, small_corpus, tmp_path):
        audio.save_corpus(small_corpus, tmp_path)
        back = audio.load_corpus(tmp_path / "manifest.tsv")
        assert [i.utterance_id for i in back] == [i.utterance_id for i in small_corpus]
        assert [i.transcript for i in back] == [i.transcript for i in small_corpus]
        assert [i.speaker_id for i in back] == [i.speaker_id for i in small_corpus]


class TestSynthNoise:
    @pytest.mark.parametrize("kind", ["white", "babble", "music"])
    def test_kinds(self, kind):
        w = audio.synth_noise(kind, 0.5, 3)
        assert len(w) == 8000
        assert audio.rms(w.samples) > 0

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            audio.synth_noise("traffic", 0.5, 3)

    def test_deterministic(self):
        a = audio.synth_noise("babble", 0.3, 9)
        b = audio.synth_noise("babble", 0.3, 9)
        assert np.array_equal(a.samples, b.samples)
