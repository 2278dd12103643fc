"""Log-mel feature extraction and inversion back to audio.

Front end: STFT magnitudes -> 80-band mel -> log, with optional delta
and acceleration blocks. Inversion: mel pseudo-inverse to linear
magnitudes, then Griffin-Lim phase retrieval.
"""

from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform
from .errors import ConfigError, NumericError, TooShortError

LOG_FLOOR = 1e-10
N_MELS = 80


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not (self.hop_length <= self.win_length <= self.fft_size):
            raise ConfigError("need hop <= win <= fft_size")
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError("fft_size must be a power of two")
        if self.window != "hann":
            raise ConfigError(f"unknown window: {self.window}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def _window(cfg: StftConfig) -> np.ndarray:
    n = cfg.win_length
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame_count(n_samples: int, cfg: StftConfig) -> int:
    return 1 + n_samples // cfg.hop_length


def stft(w: Waveform, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, frames centered via reflection padding."""
    x = w.samples
    if x.size < cfg.win_length:
        raise TooShortError(
            f"signal of {x.size} samples shorter than window {cfg.win_length}"
        )
    pad = cfg.win_length // 2
    padded = np.pad(x, pad, mode="reflect")
    T = _frame_count(x.size, cfg)
    win = _window(cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(T)[:, None]
    frames = padded[idx] * win
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def stft_mag(w: Waveform, cfg: StftConfig) -> np.ndarray:
    """T x (fft_size/2+1) magnitude spectrogram."""
    return np.abs(stft(w, cfg))


def istft(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Least-squares inverse STFT by windowed overlap-add.

    ``length`` trims/pads the output; defaults to (T-1)*hop, the longest
    length consistent with the frame count.
    """
    T = spec.shape[0]
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.win_length]
    pad = cfg.win_length // 2
    total = (T - 1) * cfg.hop_length + cfg.win_length
    num = np.zeros(total)
    den = np.zeros(total)
    for t in range(T):
        s = t * cfg.hop_length
        num[s:s + cfg.win_length] += frames[t] * win
        den[s:s + cfg.win_length] += win * win
    out = num / np.maximum(den, 1e-12)
    out = out[pad:]
    if length is None:
        length = (T - 1) * cfg.hop_length
    if out.size >= length:
        out = out[:length]
    else:
        out = np.pad(out, (0, length - out.size))
    return out


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


class MelFilterbank:
    """80 triangular filters with centers uniform on the mel scale."""

    def __init__(self, sample_rate_hz: int = 16000, fft_size: int = 512,
                 n_mels: int = N_MELS, fmin: float = 20.0, fmax: float = 7600.0):
        if not (0 <= fmin < fmax):
            raise ConfigError("need 0 <= fmin < fmax")
        if fmax > sample_rate_hz / 2:
            raise ConfigError("fmax above Nyquist")
        self.sample_rate_hz = sample_rate_hz
        self.fft_size = fft_size
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax

        n_bins = fft_size // 2 + 1
        bin_freqs = np.arange(n_bins) * sample_rate_hz / fft_size
        mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
        hz_pts = mel_to_hz(mel_pts)
        weights = np.zeros((n_mels, n_bins))
        for i in range(n_mels):
            lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
            up = (bin_freqs - lo) / (center - lo)
            down = (hi - bin_freqs) / (hi - center)
            weights[i] = np.maximum(0.0, np.minimum(up, down))
        self.weights = weights
        self.center_freqs_hz = hz_pts[1:-1]
        self._pinv = None

    @property
    def pinv(self) -> np.ndarray:
        """Moore-Penrose pseudo-inverse, computed once and cached."""
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.weights, rcond=1e-6)
        return self._pinv


def make_mel(sample_rate_hz: int = 16000, fft_size: int = 512,
             fmin: float = 20.0, fmax: float = 7600.0) -> MelFilterbank:
    return MelFilterbank(sample_rate_hz, fft_size, N_MELS, fmin, fmax)


# ---------------------------------------------------------------------------
# Log-mel features with dynamics
# ---------------------------------------------------------------------------

@dataclass
class MelSpectrogram:
    """T x 80 log-mel matrix, optionally with delta/acceleration blocks."""

    static: np.ndarray
    delta: np.ndarray | None = None
    accel: np.ndarray | None = None

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=np.float64)
        if self.static.ndim != 2 or self.static.shape[0] < 1:
            raise ConfigError("static block must be a non-empty T x n matrix")
        if not np.all(np.isfinite(self.static)):
            raise NumericError("non-finite log-mel values")

    @property
    def with_dynamics(self) -> bool:
        return self.delta is not None

    @property
    def n_frames(self) -> int:
        return self.static.shape[0]

    def stacked(self) -> np.ndarray:
        """Concatenate channel blocks along the feature axis."""
        if not self.with_dynamics:
            return self.static
        return np.concatenate([self.static, self.delta, self.accel], axis=1)


def deltas(c: np.ndarray, n: int = 2) -> np.ndarray:
    """Regression deltas with window n and edge replication."""
    padded = np.concatenate([np.repeat(c[:1], n, axis=0), c,
                             np.repeat(c[-1:], n, axis=0)], axis=0)
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    T = c.shape[0]
    out = np.zeros_like(c)
    for k in range(1, n + 1):
        out += k * (padded[n + k:n + k + T] - padded[n - k:n - k + T])
    return out / denom


def logmel(w: Waveform, fb: MelFilterbank, cfg: StftConfig,
           with_dynamics: bool = False) -> MelSpectrogram:
    mag = stft_mag(w, cfg)
    mel = mag @ fb.weights.T
    static = np.log(np.maximum(mel, LOG_FLOOR))
    if not with_dynamics:
        return MelSpectrogram(static)
    d = deltas(static)
    return MelSpectrogram(static, delta=d, accel=deltas(d))


def normalize_mel(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-utterance mean/variance normalization; returns (norm, mean, std)."""
    mean = m.mean(axis=0)
    std = m.std(axis=0)
    safe = np.where(std > 1e-8, std, 1.0)
    return (m - mean) / safe, mean, safe


# ---------------------------------------------------------------------------
# Inversion
# ---------------------------------------------------------------------------

def mel_pinv(fb: MelFilterbank, mel_energies: np.ndarray) -> np.ndarray:
    """Linear-frequency magnitudes from linear-domain mel energies."""
    mel_energies = np.asarray(mel_energies, dtype=np.float64)
    if not np.all(np.isfinite(mel_energies)):
        raise NumericError("non-finite mel energies")
    mags = mel_energies @ fb.pinv.T
    return np.maximum(mags, 0.0)


def griffin_lim(mag: np.ndarray, cfg: StftConfig, iters: int = 60,
                sample_rate_hz: int = 16000, init: str = "random",
                rng: np.random.Generator | None = None,
                track: bool = False):
    """Classic alternating-projection phase retrieval.

    Phase is initialized from a deterministic seeded-random draw by
    default (``init="zeros"`` selects zero phase). Returns the
    reconstructed Waveform; with ``track=True`` also returns
    the per-iteration spectral convergence ||.|STFT(x_i)| - mag.||_F /
    ||mag||_F, which is non-increasing.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ConfigError("magnitudes must be non-negative")
    if init == "zeros":
        phase = np.zeros_like(mag)
    elif init == "random":
        gen = rng if rng is not None else np.random.default_rng(0)
        phase = gen.uniform(0, 2 * np.pi, size=mag.shape)
    else:
        raise ConfigError(f"unknown init: {init}")

    mag_norm = np.linalg.norm(mag)
    spec = mag * np.exp(1j * phase)
    history = []
    x = None
    for _ in range(iters):
        x = istft(spec, cfg)
        X = stft(Waveform(x, sample_rate_hz), cfg)
        if track:
            err = np.linalg.norm(np.abs(X) - mag)
            history.append(err / mag_norm if mag_norm > 0 else 0.0)
        spec = mag * np.exp(1j * np.angle(X))
    x = istft(spec, cfg)
    wav = Waveform(x, sample_rate_hz)
    if track:
        return wav, history
    return wav


# ---------------------------------------------------------------------------
# PGM image export
# ---------------------------------------------------------------------------

def export_pgm(mel: MelSpectrogram, path) -> None:
    """Write the static block as a P5 greyscale image.

    Columns are frames, rows are mel bins with low frequency at the
    bottom; min..max maps linearly to 0..255 (constant input maps to 0).
    """
    m = mel.static
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        pix = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros_like(m, dtype=np.uint8)
    # transpose to (bins, frames), flip so bin 0 ends up on the bottom row
    img = pix.T[::-1]
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + img.tobytes())
