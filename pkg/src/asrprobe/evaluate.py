"""Speaker-information and intelligibility metrics.

EER over cosine-scored utterance pairs quantifies residual speaker
identity; STOI quantifies intelligibility / denoising. Both operate on
reconstructed audio, so layer-by-layer sweeps turn hidden
representations into measurable trends.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import audio, features
from .errors import (
    AlignmentError,
    ConfigError,
    SamplingError,
    TooShortError,
    UndefinedEerError,
)
from .seeding import substream


# ---------------------------------------------------------------------------
# Speaker embedding and pair sampling
# ---------------------------------------------------------------------------

def embed_speaker(mel: features.MelSpectrogram) -> np.ndarray:
    """160-dim embedding: per-bin mean and std of the static log-mel block.

    Deliberately order-free, so it measures spectral statistics rather
    than content.
    """
    m = mel.static
    if m.shape[0] < 2:
        raise TooShortError("need at least 2 frames to embed")
    return np.concatenate([m.mean(axis=0), m.std(axis=0)])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class ScoredPair:
    utt_a: str
    utt_b: str
    label: str  # "same" | "diff"
    score: float | None = None
    condition: str = "clean"


def sample_pairs(metadata, n_per_class: int, seed: int,
                 condition: str = "clean") -> list[ScoredPair]:
    """Draw n same-speaker and n different-speaker pairs, no replacement.

    ``metadata`` is a sequence of (utterance_id, speaker_id).
    """
    metadata = list(metadata)
    pos = []
    neg = []
    for i in range(len(metadata)):
        for j in range(i + 1, len(metadata)):
            ua, sa = metadata[i]
            ub, sb = metadata[j]
            (pos if sa == sb else neg).append((ua, ub))
    if len(pos) < n_per_class or len(neg) < n_per_class:
        raise SamplingError(
            f"corpus yields {len(pos)} positive / {len(neg)} negative pairs, "
            f"need {n_per_class} of each"
        )
    rng = substream(seed, "pairs", condition)
    pick_pos = rng.choice(len(pos), size=n_per_class, replace=False)
    pick_neg = rng.choice(len(neg), size=n_per_class, replace=False)
    out = [ScoredPair(*pos[i], "same", condition=condition) for i in pick_pos]
    out += [ScoredPair(*neg[i], "diff", condition=condition) for i in pick_neg]
    return out


def sample_triplets(metadata, n_triplets: int, seed: int) -> list[tuple]:
    """(anchor, same-speaker, different-speaker) utterance triplets.

    Export-only harness for listening studies; no scoring is attached.
    """
    metadata = list(metadata)
    by_speaker = {}
    for utt, spk in metadata:
        by_speaker.setdefault(spk, []).append(utt)
    speakers = [s for s, utts in by_speaker.items() if len(utts) >= 2]
    if len(speakers) < 1 or len(by_speaker) < 2:
        raise SamplingError("need 2 speakers and one speaker with 2 utterances")
    rng = substream(seed, "triplets")
    out = []
    for _ in range(n_triplets):
        spk = speakers[int(rng.integers(0, len(speakers)))]
        a, b = rng.choice(len(by_speaker[spk]), size=2, replace=False)
        others = [s for s in by_speaker if s != spk]
        ospk = others[int(rng.integers(0, len(others)))]
        c = int(rng.integers(0, len(by_speaker[ospk])))
        out.append((by_speaker[spk][int(a)], by_speaker[spk][int(b)],
                    by_speaker[ospk][c]))
    return out


# ---------------------------------------------------------------------------
# Equal error rate
# ---------------------------------------------------------------------------

def _operating_points(pos: np.ndarray, neg: np.ndarray):
    """(FAR, FRR, threshold) for accept-if-score>=t at every useful t."""
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([pos, neg]))[::-1], [-np.inf]])
    points = []
    for t in thresholds:
        far = float(np.mean(neg >= t)) if t != -np.inf else 1.0
        frr = float(np.mean(pos < t)) if t != -np.inf else 0.0
        points.append((far, frr, float(t) if np.isfinite(t) else t))
    return points


def compute_eer(pairs: list[ScoredPair]) -> dict:
    """EER with linear interpolation between achievable operating points.

    Operating points live in the (false-accept, false-reject) plane;
    interpolation follows the convex frontier (any point on a segment
    between two thresholds is achievable by randomizing between them).
    The EER is where that frontier meets FAR = FRR.
    """
    pos = np.array([p.score for p in pairs if p.label == "same"], dtype=np.float64)
    neg = np.array([p.score for p in pairs if p.label == "diff"], dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedEerError("need at least one pair of each class")
    if np.any(~np.isfinite(pos)) or np.any(~np.isfinite(neg)):
        raise ConfigError("non-finite or missing scores")

    pts = _operating_points(pos, neg)
    # frontier: convex minorant of FRR as a function of FAR
    pts.sort(key=lambda p: (p[0], p[1]))
    hull = []
    for p in pts:
        while len(hull) >= 1 and hull[-1][0] == p[0] and hull[-1][1] >= p[1]:
            hull.pop()
        while len(hull) >= 2:
            (a1, r1, _), (a2, r2, _) = hull[-2], hull[-1]
            a3, r3 = p[0], p[1]
            # drop middle point if not strictly below the chord
            if (r2 - r1) * (a3 - a1) >= (r3 - r1) * (a2 - a1):
                hull.pop()
            else:
                break
        hull.append(p)

    for (a1, r1, t1), (a2, r2, t2) in zip(hull, hull[1:]):
        if r1 >= a1 and r2 <= a2:  # frontier crosses the diagonal here
            denom = (a2 - a1) - (r2 - r1)
            lam = 0.0 if denom == 0 else (r1 - a1) / denom
            eer = a1 + lam * (a2 - a1)
            if np.isfinite(t1) and np.isfinite(t2):
                thr = t1 + lam * (t2 - t1)
            else:
                thr = t2 if np.isfinite(t2) else t1
            return {"eer": float(eer), "threshold": float(thr)}
    # frontier entirely on one side; endpoints guarantee we never get here
    raise RuntimeError("no diagonal crossing found")


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

_STOI_RATE = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_FFT = 512
_STOI_NBANDS = 15
_STOI_LOWEST_CF = 150.0
_STOI_SEG = 30  # frames per short-time segment (384 ms)
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE_DB = 40.0


def _hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frames(x: np.ndarray) -> np.ndarray:
    n = 1 + (x.size - _STOI_FRAME) // _STOI_HOP
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(n)[:, None]
    return x[idx]


def _remove_silent(clean: np.ndarray, degraded: np.ndarray):
    """Drop frames 40 dB below the clean maximum, rebuild by overlap-add."""
    w = _hann(_STOI_FRAME)
    xf = _frames(clean) * w
    yf = _frames(degraded) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-30)
    keep = energy > energy.max() - _STOI_DYN_RANGE_DB
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    out_len = (n - 1) * _STOI_HOP + _STOI_FRAME if n else 0
    x = np.zeros(out_len)
    y = np.zeros(out_len)
    for i in range(n):
        s = i * _STOI_HOP
        x[s:s + _STOI_FRAME] += xf[i]
        y[s:s + _STOI_FRAME] += yf[i]
    return x, y


def _third_octave_matrix() -> np.ndarray:
    n_bins = _STOI_FFT // 2 + 1
    bin_freqs = np.arange(n_bins) * _STOI_RATE / _STOI_FFT
    mat = np.zeros((_STOI_NBANDS, n_bins))
    for k in range(_STOI_NBANDS):
        cf = _STOI_LOWEST_CF * 2.0 ** (k / 3.0)
        lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        mat[k] = (bin_freqs >= lo) & (bin_freqs < hi)
    return mat


def stoi(clean: audio.Waveform, degraded: audio.Waveform) -> float:
    """Short-time objective intelligibility of degraded w.r.t. clean.

    Follows the reference recipe: 10 kHz, energy-based silent-frame
    removal, 15 one-third-octave bands from 150 Hz, 384 ms segments,
    -15 dB clipping of the normalized band envelopes, then the mean of
    the per-band per-segment correlation coefficients.
    """
    if clean.sample_rate_hz != degraded.sample_rate_hz:
        raise ConfigError("sample rates differ")
    if len(clean) != len(degraded):
        raise AlignmentError("signals must have equal length (trim first)")

    x = audio.resample(clean, _STOI_RATE).samples
    y = audio.resample(degraded, _STOI_RATE).samples
    if x.size < _STOI_FRAME:
        raise TooShortError("signal shorter than one analysis frame")
    x, y = _remove_silent(x, y)

    w = _hann(_STOI_FRAME)
    if x.size < _STOI_FRAME:
        raise TooShortError("no frames survive silence removal")
    xf = _frames(x) * w
    yf = _frames(y) * w
    if xf.shape[0] < _STOI_SEG:
        raise TooShortError(
            f"only {xf.shape[0]} frames after silence removal, need {_STOI_SEG}"
        )
    X = np.abs(np.fft.rfft(xf, n=_STOI_FFT, axis=1)) ** 2
    Y = np.abs(np.fft.rfft(yf, n=_STOI_FFT, axis=1)) ** 2
    band = _third_octave_matrix()
    Xb = np.sqrt(X @ band.T)  # (frames, 15)
    Yb = np.sqrt(Y @ band.T)

    clip_gain = 1.0 + 10.0 ** (_STOI_BETA_DB / 20.0)
    vals = []
    for m in range(_STOI_SEG, Xb.shape[0] + 1):
        xs = Xb[m - _STOI_SEG:m].T  # (15, 30)
        ys = Yb[m - _STOI_SEG:m].T
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / np.maximum(
            np.linalg.norm(ys, axis=1, keepdims=True), 1e-30)
        yn = np.minimum(ys * alpha, xs * clip_gain)
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yn - yn.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
        corr = (xc * yc).sum(axis=1) / np.maximum(denom, 1e-30)
        vals.append(corr)
    return float(np.mean(vals))


def stoi_trimmed(clean: audio.Waveform, degraded: audio.Waveform) -> float:
    """STOI after trimming both signals to the shorter length."""
    n = min(len(clean), len(degraded))
    return stoi(audio.Waveform(clean.samples[:n], clean.sample_rate_hz),
                audio.Waveform(degraded.samples[:n], degraded.sample_rate_hz))


# ---------------------------------------------------------------------------
# Trend statistics and report I/O
# ---------------------------------------------------------------------------

def spearman(xs, ys) -> float:
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return 0.0  # a constant series carries no rank trend
    rho = spearmanr(xs, ys).statistic
    return float(rho)


def write_report_csv(rows, path) -> None:
    """rows: (layer, metric, condition, value)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "metric", "condition", "value"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])


def write_scores_csv(pairs: list[ScoredPair], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["utt_a", "utt_b", "label", "score"])
        for p in pairs:
            writer.writerow([p.utt_a, p.utt_b, p.label, f"{p.score:.6f}"])
