"""Non-contextual Highway probing decoder.

Each decoder maps one layer's hidden frames back to 80-dim log-mel
frames: a linear upsampling projection (one hidden frame expands to
``factor`` consecutive projected frames), 4 Highway layers, and a
linear output projection. No layer sees temporal context, so output
frame t depends only on hidden frame floor(t / factor).
"""

from dataclasses import dataclass

import numpy as np

from . import features, nn
from .audio import Waveform
from .errors import AlignmentError, ConfigError
from .hrep import HiddenReps
from .seeding import substream

D_PROJ = 256
N_HIGHWAY = 4
N_OUT = features.N_MELS


class ProbeDecoder:
    def __init__(self, layer_tag: str, d_in: int, factor: int,
                 rng: np.random.Generator, d_proj: int = D_PROJ):
        self.layer_tag = layer_tag
        self.d_in = d_in
        self.factor = factor
        self.d_proj = d_proj
        self.up = nn.Dense(d_in, factor * d_proj, rng)
        self.highways = [nn.Highway(d_proj, rng) for _ in range(N_HIGHWAY)]
        self.out = nn.Dense(d_proj, N_OUT, rng)

    @property
    def _layers(self):
        return [self.up, *self.highways, self.out]

    @property
    def params(self) -> dict:
        flat = {}
        names = ["up"] + [f"hw{i}" for i in range(N_HIGHWAY)] + ["out"]
        for lname, layer in zip(names, self._layers):
            for pname, p in layer.params.items():
                flat[f"{lname}/{pname}"] = p
        return flat

    def set_params(self, flat: dict) -> None:
        names = ["up"] + [f"hw{i}" for i in range(N_HIGHWAY)] + ["out"]
        byname = dict(zip(names, self._layers))
        for key, value in flat.items():
            lname, pname = key.split("/", 1)
            byname[lname].params[pname] = value

    def zero_grads(self):
        for layer in self._layers:
            layer.zero_grads()

    def collect_grads(self) -> dict:
        flat = {}
        names = ["up"] + [f"hw{i}" for i in range(N_HIGHWAY)] + ["out"]
        for lname, layer in zip(names, self._layers):
            for pname, g in layer.grads.items():
                flat[f"{lname}/{pname}"] = g
        return flat

    def forward(self, h: np.ndarray) -> np.ndarray:
        """(T_k, d_in) hidden frames -> (factor * T_k, 80) log-mel frames."""
        u = self.up.forward(h)
        x = u.reshape(h.shape[0] * self.factor, self.d_proj)
        for hw in self.highways:
            x = hw.forward(x)
        return self.out.forward(x)

    def backward(self, dout: np.ndarray) -> None:
        dx = self.out.backward(dout)
        for hw in reversed(self.highways):
            dx = hw.backward(dx)
        self.up.backward(dx.reshape(-1, self.factor * self.d_proj))

    def reconstruct(self, hidden: HiddenReps) -> features.MelSpectrogram:
        if hidden.layer_tag != self.layer_tag:
            raise ConfigError(
                f"decoder for {self.layer_tag!r} fed {hidden.layer_tag!r} representations"
            )
        if hidden.downsample_factor != self.factor:
            raise ConfigError(
                f"decoder factor {self.factor} != representation factor "
                f"{hidden.downsample_factor}"
            )
        return features.MelSpectrogram(self.forward(hidden.frames))

    def descriptor(self) -> str:
        return (f"probe/v1/{self.layer_tag};d_in={self.d_in};"
                f"factor={self.factor};d_proj={self.d_proj}")

    def save(self, path) -> None:
        nn.save_checkpoint(self.params, self.descriptor(), path)


def probe_from_checkpoint(path) -> ProbeDecoder:
    desc, params = nn.load_checkpoint(path)
    if not desc.startswith("probe/v1/"):
        raise ConfigError(f"{path}: not a probe checkpoint")
    head, *fields = desc.split(";")
    tag = head[len("probe/v1/"):]
    meta = dict(f.split("=") for f in fields)
    dec = ProbeDecoder(tag, int(meta["d_in"]), int(meta["factor"]),
                       substream(0, "unused"), d_proj=int(meta["d_proj"]))
    dec.set_params(params)
    return dec


@dataclass
class ProbeTrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


def _check_alignment(reps: list[HiddenReps], targets: dict) -> None:
    bad = []
    for rep in reps:
        if rep.utterance_id not in targets:
            bad.append(rep.utterance_id)
            continue
        out_T = rep.frames.shape[0] * rep.downsample_factor
        tgt_T = targets[rep.utterance_id].shape[0]
        if not (tgt_T <= out_T < tgt_T + rep.downsample_factor):
            bad.append(rep.utterance_id)
    if bad:
        raise AlignmentError(f"misaligned utterances: {sorted(set(bad))}")


def train_probe(reps: list[HiddenReps], targets: dict,
                cfg: ProbeTrainConfig) -> tuple[ProbeDecoder, list[float]]:
    """Fit a decoder by mean absolute error against static log-mel targets.

    ``targets`` maps utterance_id to an unnormalized (T, 80) log-mel
    matrix; trailing predicted frames beyond the target length carry no
    gradient. The representations are inputs only — nothing here
    touches the ASR that produced them.
    """
    if not reps:
        raise ConfigError("no hidden representations given")
    tags = {r.layer_tag for r in reps}
    if len(tags) > 1:
        raise ConfigError(f"mixed layer tags in probe training: {sorted(tags)}")
    _check_alignment(reps, targets)
    rep0 = reps[0]
    dec = ProbeDecoder(rep0.layer_tag, rep0.frames.shape[1],
                       rep0.downsample_factor, substream(cfg.seed, "probe-init", rep0.layer_tag))
    opt = nn.Adam(lr=cfg.lr)
    order_rng = substream(cfg.seed, "probe-train", rep0.layer_tag)

    history = []
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(reps))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [reps[i] for i in order[start:start + cfg.batch_size]]
            dec.zero_grads()
            total_cells = sum(targets[r.utterance_id].size for r in batch)
            batch_loss = 0.0
            for rep in batch:
                tgt = targets[rep.utterance_id]
                pred = dec.forward(rep.frames)
                diff = pred[:tgt.shape[0]] - tgt
                batch_loss += float(np.abs(diff).sum())
                dpred = np.zeros_like(pred)
                dpred[:tgt.shape[0]] = np.sign(diff) / total_cells
                dec.backward(dpred)
            grads = dec.collect_grads()
            params = dec.params
            opt.step(params, grads)
            dec.set_params(params)
            losses.append(batch_loss / total_cells)
        history.append(float(np.mean(losses)))
    return dec, history


def probe_l1(dec: ProbeDecoder, reps: list[HiddenReps], targets: dict) -> float:
    """Mean absolute reconstruction error over all frames and bins."""
    total = 0.0
    cells = 0
    for rep in reps:
        tgt = targets[rep.utterance_id]
        pred = dec.forward(rep.frames)[:tgt.shape[0]]
        total += float(np.abs(pred - tgt).sum())
        cells += tgt.size
    return total / cells


def audify(mel: features.MelSpectrogram, fb: features.MelFilterbank,
           cfg: features.StftConfig, iters: int = 60,
           sample_rate_hz: int = 16000) -> Waveform:
    """Log-mel to waveform: exponentiate, mel pseudo-inverse, Griffin-Lim."""
    mags = features.mel_pinv(fb, np.exp(mel.static))
    return features.griffin_lim(mags, cfg, iters=iters,
                                sample_rate_hz=sample_rate_hz)
