"""Binary container for per-layer hidden representations (HREP files)."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IncompatibleCheckpointError

HREP_MAGIC = b"HREP"
HREP_VERSION = 1


@dataclass
class HiddenReps:
    """Activation matrix of one layer for one utterance."""

    layer_tag: str
    frames: np.ndarray  # (T_k, d_k)
    downsample_factor: int
    utterance_id: str
    speaker_id: str


def save_hrep(rep: HiddenReps, path) -> None:
    frames = np.ascontiguousarray(rep.frames, dtype="<f4")
    out = [HREP_MAGIC, struct.pack("<I", HREP_VERSION)]
    for text in (rep.layer_tag, rep.utterance_id, rep.speaker_id):
        b = text.encode("utf-8")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    out.append(struct.pack("<III", rep.downsample_factor, *frames.shape))
    out.append(frames.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_hrep(path) -> HiddenReps:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated HREP file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != HREP_MAGIC:
        raise FormatError(f"{path}: bad HREP magic")
    (version,) = struct.unpack("<I", take(4))
    if version != HREP_VERSION:
        raise IncompatibleCheckpointError(f"{path}: HREP version {version}")
    texts = []
    for _ in range(3):
        (n,) = struct.unpack("<I", take(4))
        texts.append(take(n).decode("utf-8"))
    factor, T, d = struct.unpack("<III", take(12))
    frames = np.frombuffer(take(4 * T * d), dtype="<f4").reshape(T, d).astype(np.float64)
    return HiddenReps(texts[0], frames, factor, texts[1], texts[2])
