"""Waveform ingestion, synthesis, and SNR-controlled noise mixing."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter, resample_poly

from .errors import (
    ConfigError,
    DegenerateSignalError,
    FormatError,
    NumericError,
    UnsupportedEncodingError,
)
from .seeding import substream

CANONICAL_RATE = 16000


@dataclass
class Waveform:
    """Mono audio signal with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigError("Waveform samples must be one-dimensional")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise NumericError("Waveform contains non-finite amplitudes")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def rms(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    return float(np.sqrt(np.mean(samples * samples)))


# ---------------------------------------------------------------------------
# WAV container I/O (RIFF, PCM16 and IEEE float32)
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file; multi-channel input is averaged to mono."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise FormatError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1:
        raise FormatError(f"{path}: zero channels")

    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits})"
        )

    usable = (samples.size // channels) * channels
    samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(w: Waveform, path) -> None:
    """Write a PCM16 WAV file; amplitudes are clamped to [-1, 1]."""
    if not np.all(np.isfinite(w.samples)):
        raise NumericError("refusing to write non-finite samples")
    clamped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clamped * 32767.0).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, w.sample_rate_hz, w.sample_rate_hz * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as f:
        f.write(header + payload)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample(w: Waveform, target_hz: int) -> Waveform:
    """Polyphase windowed-sinc resampling to ``target_hz``.

    Output length is round(len * target / source); resample_poly's
    ceil-length output is trimmed or edge-padded to match.
    """
    if target_hz <= 0:
        raise ConfigError("target_hz must be positive")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), target_hz)
    g = np.gcd(target_hz, w.sample_rate_hz)
    up, down = target_hz // g, w.sample_rate_hz // g
    out = resample_poly(w.samples, up, down)
    want = int(round(len(w) * target_hz / w.sample_rate_hz))
    if len(out) > want:
        out = out[:want]
    elif len(out) < want:
        out = np.pad(out, (0, want - len(out)), mode="edge")
    return Waveform(out, target_hz)


# ---------------------------------------------------------------------------
# SNR mixing
# ---------------------------------------------------------------------------

def snr_gain(speech_rms: float, noise_rms: float, snr_db: float) -> float:
    """Gain applied to noise so speech/noise power ratio equals snr_db."""
    return speech_rms / (noise_rms * 10.0 ** (snr_db / 20.0))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator | None = None) -> Waveform:
    """Add noise to speech at an exact SNR.

    Noise shorter than speech is tiled; the crop offset is drawn from
    ``rng`` (0 when rng is None, keeping the default deterministic).
    """
    if speech.sample_rate_hz != noise.sample_rate_hz:
        raise ConfigError("speech and noise sample rates differ")
    n = len(speech)
    if n == 0:
        raise DegenerateSignalError("empty speech signal")
    noise_samples = noise.samples
    if noise_samples.size == 0:
        raise DegenerateSignalError("empty noise signal")
    if noise_samples.size < n:
        reps = -(-n // noise_samples.size)
        noise_samples = np.tile(noise_samples, reps)
    max_offset = noise_samples.size - n
    offset = 0 if (rng is None or max_offset == 0) else int(rng.integers(0, max_offset + 1))
    crop = noise_samples[offset:offset + n]

    s_rms, n_rms = rms(speech.samples), rms(crop)
    if s_rms == 0.0:
        raise DegenerateSignalError("speech has zero RMS")
    if n_rms == 0.0:
        raise DegenerateSignalError("noise crop has zero RMS")
    g = snr_gain(s_rms, n_rms, snr_db)
    return Waveform(speech.samples + g * crop, speech.sample_rate_hz)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusSpec:
    """Recipe for a deterministic spoken-symbol corpus."""

    vocab: list
    n_speakers: int
    utterances_per_speaker: int
    tokens_per_utterance: int
    seed: int
    sample_rate_hz: int = CANONICAL_RATE
    token_duration_s: float = 0.14
    gap_duration_s: float = 0.02


@dataclass
class CorpusItem:
    waveform: Waveform
    transcript: list
    speaker_id: str
    utterance_id: str


def _token_formants(index: int) -> tuple[float, float]:
    # Distinct two-formant signature per vocabulary slot.
    f1 = 380.0 + 130.0 * (index % 5)
    f2 = 1350.0 + 240.0 * (index % 7) + 90.0 * index
    return f1, f2


def _speaker_voice(index: int, n_speakers: int) -> tuple[float, float, float]:
    """Per-speaker fundamental, formant shift, and spectral tilt.

    The tilt (harmonic roll-off exponent) gives each voice a distinct
    brightness — a coarse spectral-envelope cue that long-term mel
    statistics pick up reliably.
    """
    f0 = 100.0 + 40.0 * index
    centered = index - (n_speakers - 1) / 2.0
    shift = 1.0 + 0.12 * centered
    tilt = 0.85 + 0.4 * centered
    return f0, shift, tilt


def _synth_token(token_index: int, f0: float, formant_shift: float,
                 tilt: float, sr: int, duration_s: float,
                 jitter: float) -> np.ndarray:
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0 = f0 * (1.0 + jitter)
    f1, f2 = _token_formants(token_index)
    f1, f2 = f1 * formant_shift, f2 * formant_shift
    sig = np.zeros(n)
    k = 1
    while k * f0 < 7200.0:
        fk = k * f0
        env = (
            np.exp(-0.5 * ((fk - f1) / 110.0) ** 2)
            + 0.7 * np.exp(-0.5 * ((fk - f2) / 170.0) ** 2)
            + 0.02
        )
        sig += (env / k ** max(tilt, 0.05)) * np.sin(2.0 * np.pi * fk * t)
        k += 1
    # raised-cosine fade at both ends to avoid clicks
    fade = min(int(0.01 * sr), n // 4)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    sig[:fade] *= ramp
    sig[-fade:] *= ramp[::-1]
    return sig


def synth_corpus(spec: CorpusSpec) -> list[CorpusItem]:
    """Generate a deterministic formant-signature corpus.

    Each vocabulary token has a fixed two-formant harmonic signature;
    each speaker has a distinct fundamental and formant shift. The same
    seed always produces a bit-identical corpus.
    """
    if not spec.vocab:
        raise ConfigError("corpus vocabulary is empty")
    if spec.n_speakers < 1 or spec.utterances_per_speaker < 1:
        raise ConfigError("need at least one speaker and one utterance")
    sr = spec.sample_rate_hz
    gap = np.zeros(int(round(spec.gap_duration_s * sr)))
    items = []
    for s in range(spec.n_speakers):
        f0, shift, tilt = _speaker_voice(s, spec.n_speakers)
        for u in range(spec.utterances_per_speaker):
            rng = substream(spec.seed, "corpus", s, u)
            token_ids = rng.integers(0, len(spec.vocab), size=spec.tokens_per_utterance)
            pieces = []
            for tid in token_ids:
                jitter = float(rng.uniform(-0.03, 0.03))
                pieces.append(_synth_token(int(tid), f0, shift, tilt, sr,
                                           spec.token_duration_s, jitter))
                pieces.append(gap)
            sig = np.concatenate(pieces[:-1]) if len(pieces) > 1 else pieces[0]
            peak = np.max(np.abs(sig))
            if peak > 0:
                sig = 0.3 * sig / peak
            items.append(CorpusItem(
                waveform=Waveform(sig, sr),
                transcript=[spec.vocab[int(t)] for t in token_ids],
                speaker_id=f"spk{s:02d}",
                utterance_id=f"spk{s:02d}_utt{u:03d}",
            ))
    return items


def synth_noise(kind: str, duration_s: float, seed: int,
                sample_rate_hz: int = CANONICAL_RATE) -> Waveform:
    """Deterministic noise signal for augmentation and noisy test sets.

    ``babble``: low-pass filtered Gaussian noise; ``music``: a slowly
    arpeggiated chord, loosely imitating the piano interference of
    MUSAN-style corpora; ``white``: flat Gaussian noise.
    """
    sr = sample_rate_hz
    n = int(round(duration_s * sr))
    rng = substream(seed, "noise", kind)
    if kind == "white":
        sig = rng.standard_normal(n)
    elif kind == "babble":
        sig = rng.standard_normal(n)
        # one-pole low-pass, cutoff ~500 Hz
        a = np.exp(-2.0 * np.pi * 500.0 / sr)
        sig = lfilter([1.0 - a], [1.0, -a], sig)
    elif kind == "music":
        t = np.arange(n) / sr
        notes = [262.0, 330.0, 392.0, 523.0]
        sig = np.zeros(n)
        step = int(0.25 * sr)
        for i, start in enumerate(range(0, n, step)):
            f = notes[i % len(notes)] * (1.0 + 0.001 * float(rng.standard_normal()))
            seg = slice(start, min(start + step, n))
            tt = t[seg] - t[seg.start]
            sig[seg] += np.sin(2 * np.pi * f * tt) * np.exp(-3.0 * tt)
            sig[seg] += 0.5 * np.sin(2 * np.pi * 2 * f * tt) * np.exp(-4.0 * tt)
    else:
        raise ConfigError(f"unknown noise kind: {kind}")
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig = 0.3 * sig / peak
    return Waveform(sig, sr)


# ---------------------------------------------------------------------------
# Corpus manifest (TSV: path, transcript, speaker_id)
# ---------------------------------------------------------------------------

def save_corpus(items: list[CorpusItem], out_dir) -> str:
    """Write WAVs plus a TSV manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    lines = []
    for item in items:
        wav_path = os.path.join(out_dir, item.utterance_id + ".wav")
        write_wav(item.waveform, wav_path)
        lines.append("\t".join([
            item.utterance_id + ".wav",
            " ".join(item.transcript),
            item.speaker_id,
        ]))
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return manifest_path


def load_corpus(manifest_path) -> list[CorpusItem]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    items = []
    with open(manifest_path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                rel, transcript, speaker = line.split("\t")
            except ValueError as exc:
                raise FormatError(f"bad manifest line: {line!r}") from exc
            wav = read_wav(os.path.join(base, rel))
            utt_id = os.path.splitext(os.path.basename(rel))[0]
            items.append(CorpusItem(wav, transcript.split(), speaker, utt_id))
    return items
