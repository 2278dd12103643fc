import numpy as np
import pytest

from asrprobe import asr, audio, features, hrep, nn
from asrprobe.errors import ConfigError
from asrprobe.seeding import substream


@pytest.fixture(scope="module")
def tiny_corpus():
    spec = audio.CorpusSpec(vocab=["a", "b", "c"], n_speakers=2,
                            utterances_per_speaker=3,
                            tokens_per_utterance=3, seed=21)
    return audio.synth_corpus(spec)


class TestArch:
    def test_layer_tags_pure(self):
        arch = asr.EncoderArch(asr.PURE_RECURRENT)
        assert arch.layer_tags() == ["blstm1", "blstm2", "blstm3",
                                     "blstm4", "blstm5"]

    def test_layer_tags_conv(self):
        tags = asr.EncoderArch(asr.CONV_FRONT_END).layer_tags()
        assert tags[:4] == ["cnn1", "cnn2", "cnn3", "cnn4"]
        assert tags[4:] == ["blstm1", "blstm2", "blstm3", "blstm4", "blstm5"]

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            asr.EncoderArch("transformer")


class TestPrepareInput:
    def test_shape_and_normalization(self, tiny_corpus, fb, stft_cfg):
        x = asr.prepare_input(tiny_corpus[0].waveform, fb, stft_cfg)
        assert x.shape[1] == 240
        assert np.allclose(x.mean(axis=0), 0.0, atol=1e-8)

    def test_unnormalized_keeps_offsets(self, tiny_corpus, fb, stft_cfg):
        x = asr.prepare_input(tiny_corpus[0].waveform, fb, stft_cfg,
                              normalize=False)
        assert not np.allclose(x[:, :80].mean(axis=0), 0.0, atol=1e-3)


class TestEncoderShapes:
    @pytest.mark.parametrize("kind,factors", [
        # captured after each decimation step (decimation follows blstm2-4)
        (asr.PURE_RECURRENT, {"blstm1": 1, "blstm2": 2, "blstm3": 4,
                              "blstm4": 8, "blstm5": 8}),
        (asr.CONV_FRONT_END, {"cnn1": 1, "cnn2": 2, "cnn3": 2, "cnn4": 4,
                              "blstm1": 4, "blstm2": 4, "blstm3": 4,
                              "blstm4": 4, "blstm5": 4}),
    ])
    def test_downsampling_factors(self, kind, factors):
        arch = asr.EncoderArch(kind, hidden=8)
        enc = asr.Encoder(arch, ["a", "b"], substream(0, "init"))
        T = 40
        x = np.random.default_rng(0).standard_normal((T, 240))
        logits, hidden = enc.forward(x, capture=True)
        assert logits.shape == (enc.output_length(T), 3)  # blank + 2 tokens
        for tag, factor in factors.items():
            frames, f = hidden[tag]
            assert f == factor, tag
            assert frames.shape[0] == -(-T // factor), tag

    def test_output_length_matches_forward(self):
        for kind in (asr.PURE_RECURRENT, asr.CONV_FRONT_END):
            enc = asr.Encoder(asr.EncoderArch(kind, hidden=8), ["a"],
                              substream(0, "init"))
            for T in (17, 32, 41):
                x = np.zeros((T, 240))
                logits, _ = enc.forward(x)
                assert logits.shape[0] == enc.output_length(T)


class TestEncoderCheckpoint:
    def test_round_trip(self, tmp_path):
        arch = asr.EncoderArch(asr.PURE_RECURRENT, hidden=8)
        enc = asr.Encoder(arch, ["a", "b"], substream(3, "init"))
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(enc.params, enc.descriptor(), path)
        back = asr.encoder_from_checkpoint(path)
        assert back.vocab == enc.vocab
        assert back.arch.kind == arch.kind
        x = np.random.default_rng(1).standard_normal((20, 240))
        a, _ = enc.forward(x)
        b, _ = back.forward(x)
        assert np.array_equal(a, b)


class TestTraining:
    def test_loss_decreases(self, tiny_corpus):
        arch = asr.EncoderArch(asr.PURE_RECURRENT, hidden=16)
        cfg = asr.TrainConfig(epochs=8, batch_size=4, lr=3e-3, seed=5)
        _, history = asr.train_asr(tiny_corpus, arch, cfg)
        assert history[-1] < history[0]

    def test_deterministic(self, tiny_corpus):
        arch = asr.EncoderArch(asr.PURE_RECURRENT, hidden=8)
        cfg = asr.TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=5)
        enc1, h1 = asr.train_asr(tiny_corpus, arch, cfg)
        enc2, h2 = asr.train_asr(tiny_corpus, arch, cfg)
        assert h1 == h2
        for k in enc1.params:
            assert np.array_equal(enc1.params[k], enc2.params[k])

    def test_augment_requires_noise(self, tiny_corpus):
        arch = asr.EncoderArch(asr.PURE_RECURRENT, hidden=8)
        cfg = asr.TrainConfig(epochs=1, seed=0, augment=True)
        with pytest.raises(ConfigError):
            asr.train_asr(tiny_corpus, arch, cfg, noises=None)


class TestExtractHidden:
    def test_files_and_manifest(self, tiny_corpus, tmp_path):
        enc = asr.Encoder(asr.EncoderArch(asr.PURE_RECURRENT, hidden=8),
                          ["a", "b", "c"], substream(0, "init"))
        manifest = asr.extract_hidden(enc, tiny_corpus[:2],
                                      ["features", "blstm1", "blstm5"],
                                      tmp_path)
        lines = open(manifest).read().splitlines()
        assert len(lines) == 6
        rep = hrep.load_hrep(tmp_path / "spk00_utt000__blstm5.hrep")
        assert rep.downsample_factor == 8
        assert rep.speaker_id == "spk00"

    def test_features_tag_unnormalized(self, tiny_corpus, tmp_path, fb, stft_cfg):
        enc = asr.Encoder(asr.EncoderArch(asr.PURE_RECURRENT, hidden=8),
                          ["a"], substream(0, "init"))
        asr.extract_hidden(enc, tiny_corpus[:1], ["features"], tmp_path)
        rep = hrep.load_hrep(tmp_path / "spk00_utt000__features.hrep")
        raw = asr.prepare_input(tiny_corpus[0].waveform, fb, stft_cfg,
                                normalize=False)
        assert np.allclose(rep.frames, raw.astype(np.float32), atol=1e-6)

    def test_unknown_tag(self, tiny_corpus, tmp_path):
        enc = asr.Encoder(asr.EncoderArch(asr.PURE_RECURRENT, hidden=8),
                          ["a"], substream(0, "init"))
        with pytest.raises(ConfigError):
            asr.extract_hidden(enc, tiny_corpus[:1], ["blstm9"], tmp_path)


class TestHrepContainer:
    def test_round_trip(self, tmp_path, rng):
        rep = hrep.HiddenReps("blstm2", rng.standard_normal((7, 5)), 2,
                              "utt1", "spkA")
        p = tmp_path / "r.hrep"
        hrep.save_hrep(rep, p)
        back = hrep.load_hrep(p)
        assert back.layer_tag == "blstm2"
        assert back.downsample_factor == 2
        assert back.utterance_id == "utt1"
        assert back.speaker_id == "spkA"
        assert np.allclose(back.frames, rep.frames.astype(np.float32))

    def test_truncated(self, tmp_path, rng):
        rep = hrep.HiddenReps("x", rng.standard_normal((3, 2)), 1, "u", "s")
        p = tmp_path / "r.hrep"
        hrep.save_hrep(rep, p)
        p.write_bytes(p.read_bytes()[:-5])
        from asrprobe.errors import FormatError
        with pytest.raises(FormatError):
            hrep.load_hrep(p)
