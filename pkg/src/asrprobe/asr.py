"""CTC encoders, training loop, and hidden-representation extraction.

Two architectures: a pure-recurrent stack of 5 bidirectional LSTMs with
frame decimation after layers 2, 3 and 4, and a conv-front-end model
with 4 convolution layers (2x2 max-pool after layers 2 and 4) followed
by the same recurrent stack.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import ctc, features, nn
from .audio import Waveform, mix_at_snr
from .errors import ConfigError
from .hrep import HiddenReps, save_hrep
from .seeding import substream

log = logging.getLogger(__name__)

PURE_RECURRENT = "pure-recurrent"
CONV_FRONT_END = "conv-front-end"

N_MELS = features.N_MELS
INPUT_CHANNELS = 3  # static + delta + acceleration


@dataclass
class EncoderArch:
    kind: str = PURE_RECURRENT
    hidden: int = 64  # LSTM size per direction
    conv_channels: tuple = (16, 16, 32, 32)

    def __post_init__(self):
        if self.kind not in (PURE_RECURRENT, CONV_FRONT_END):
            raise ConfigError(f"unknown architecture kind: {self.kind}")

    def layer_tags(self) -> list[str]:
        tags = [f"blstm{i}" for i in range(1, 6)]
        if self.kind == CONV_FRONT_END:
            tags = [f"cnn{i}" for i in range(1, 5)] + tags
        return tags


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    augment: bool = False
    snr_range: tuple = (0.0, 20.0)
    grad_clip: float = 5.0


def build_vocab(corpus) -> list[str]:
    tokens = sorted({t for item in corpus for t in item.transcript})
    if not tokens:
        raise ConfigError("corpus has no tokens")
    return tokens


class Encoder:
    """CTC encoder with per-layer hidden state capture."""

    def __init__(self, arch: EncoderArch, vocab: list[str], rng: np.random.Generator):
        self.arch = arch
        self.vocab = list(vocab)
        h = arch.hidden
        self.layers = {}
        if arch.kind == CONV_FRONT_END:
            c = arch.conv_channels
            self.layers["cnn1"] = nn.Conv2d(INPUT_CHANNELS, c[0], rng)
            self.layers["cnn2"] = nn.Conv2d(c[0], c[1], rng)
            self.layers["cnn3"] = nn.Conv2d(c[1], c[2], rng)
            self.layers["cnn4"] = nn.Conv2d(c[2], c[3], rng)
            rnn_in = c[3] * (N_MELS // 4)
        else:
            rnn_in = INPUT_CHANNELS * N_MELS
        dims = [rnn_in] + [2 * h] * 4
        for i in range(1, 6):
            self.layers[f"blstm{i}"] = nn.BiLSTM(dims[i - 1], h, rng)
        self.layers["output"] = nn.Dense(2 * h, len(vocab) + 1, rng)

    # -- parameter plumbing ------------------------------------------------

    @property
    def params(self) -> dict:
        flat = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.params.items():
                flat[f"{lname}/{pname}"] = p
        return flat

    def set_params(self, flat: dict) -> None:
        for key, value in flat.items():
            lname, pname = key.split("/", 1)
            self.layers[lname].params[pname] = value

    def collect_grads(self) -> dict:
        flat = {}
        for lname, layer in self.layers.items():
            for pname, g in layer.grads.items():
                flat[f"{lname}/{pname}"] = g
        return flat

    def zero_grads(self):
        for layer in self.layers.values():
            layer.zero_grads()

    # -- forward / backward ------------------------------------------------

    def forward(self, feats: np.ndarray, capture: bool = False):
        """feats: (T, 240) normalized input. Returns (logits, hidden).

        hidden maps layer_tag -> (frames, cumulative downsample factor),
        with activations taken after each layer's nonlinearity and any
        downsampling step.
        """
        hidden = {}
        self._trace = []
        if self.arch.kind == CONV_FRONT_END:
            T = feats.shape[0]
            x = feats.T.reshape(INPUT_CHANNELS, N_MELS, T)
            factor = 1
            for i in range(1, 5):
                conv = self.layers[f"cnn{i}"]
                x = np.maximum(conv.forward(x), 0.0)
                self._trace.append((f"cnn{i}", x > 0))
                if i in (2, 4):
                    pool = nn.MaxPool2x2()
                    x = pool.forward(x)
                    factor *= 2
                    self._trace.append((f"pool{i}", pool))
                if capture:
                    hidden[f"cnn{i}"] = (x.transpose(2, 0, 1).reshape(x.shape[2], -1), factor)
            x = x.transpose(2, 0, 1).reshape(x.shape[2], -1)
        else:
            x = feats
            factor = 1

        for i in range(1, 6):
            layer = self.layers[f"blstm{i}"]
            x = layer.forward(x)
            if self.arch.kind == PURE_RECURRENT and i in (2, 3, 4):
                self._trace.append((f"blstm{i}", x.shape[0]))
                x = x[::2]
                factor *= 2
            else:
                self._trace.append((f"blstm{i}", None))
            if capture:
                hidden[f"blstm{i}"] = (x.copy(), factor)
        logits = self.layers["output"].forward(x)
        return logits, hidden

    def backward(self, dlogits: np.ndarray) -> None:
        dx = self.layers["output"].backward(dlogits)
        conv_trace = []
        rnn_trace = []
        for tag, aux in self._trace:
            (conv_trace if tag.startswith(("cnn", "pool")) else rnn_trace).append((tag, aux))
        for i in range(5, 0, -1):
            entry = [e for e in rnn_trace if e[0] == f"blstm{i}"]
            if entry and entry[0][1] is not None:
                full_T = entry[0][1]
                dfull = np.zeros((full_T, dx.shape[1]))
                dfull[::2] = dx
                dx = dfull
            dx = self.layers[f"blstm{i}"].backward(dx)
        if self.arch.kind == CONV_FRONT_END:
            # back to (C, H, W)
            T = dx.shape[0]
            c_last = self.arch.conv_channels[3]
            dx = dx.reshape(T, c_last, N_MELS // 4).transpose(1, 2, 0)
            for tag, aux in reversed(conv_trace):
                if tag.startswith("pool"):
                    dx = aux.backward(dx)
                else:
                    i = int(tag[3:])
                    dx = np.where(aux, dx, 0.0)
                    dx = self.layers[f"cnn{i}"].backward(dx)

    def output_length(self, T: int) -> int:
        halvings = 3 if self.arch.kind == PURE_RECURRENT else 2
        for _ in range(halvings):
            T = -(-T // 2)  # ceil division: decimation and ceil-mode pooling
        return T

    def descriptor(self) -> str:
        return json.dumps({
            "format": "asr/v1",
            "kind": self.arch.kind,
            "hidden": self.arch.hidden,
            "conv_channels": list(self.arch.conv_channels),
            "vocab": self.vocab,
        }, sort_keys=True)


def encoder_from_checkpoint(path) -> "Encoder":
    desc, params = nn.load_checkpoint(path)
    meta = json.loads(desc)
    if meta.get("format") != "asr/v1":
        raise ConfigError(f"{path}: not an ASR checkpoint")
    arch = EncoderArch(kind=meta["kind"], hidden=meta["hidden"],
                       conv_channels=tuple(meta["conv_channels"]))
    enc = Encoder(arch, meta["vocab"], substream(0, "unused"))
    enc.set_params(params)
    return enc


# ---------------------------------------------------------------------------
# Feature preparation
# ---------------------------------------------------------------------------

def prepare_input(w: Waveform, fb: features.MelFilterbank,
                  cfg: features.StftConfig, normalize: bool = True) -> np.ndarray:
    """Stacked (T, 240) static+delta+accel input, per-utterance MVN."""
    mel = features.logmel(w, fb, cfg, with_dynamics=True)
    stacked = mel.stacked()
    if normalize:
        stacked, _, _ = features.normalize_mel(stacked)
    return stacked


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_asr(corpus, arch: EncoderArch, cfg: TrainConfig,
              noises: list[Waveform] | None = None,
              fb: features.MelFilterbank | None = None,
              stft_cfg: features.StftConfig | None = None):
    """Train a CTC encoder; returns (encoder, per-epoch loss history).

    With cfg.augment, each training utterance is mixed with a random
    noise at an SNR drawn uniformly from cfg.snr_range. Utterances too
    short for their target after downsampling are skipped and counted.
    """
    fb = fb or features.make_mel()
    stft_cfg = stft_cfg or features.StftConfig()
    vocab = build_vocab(corpus)
    token_to_id = {t: i + 1 for i, t in enumerate(vocab)}
    enc = Encoder(arch, vocab, substream(cfg.seed, "init"))
    if cfg.augment and not noises:
        raise ConfigError("augmentation requested but no noises supplied")

    opt = nn.Adam(lr=cfg.lr)
    order_rng = substream(cfg.seed, "train", "order")
    aug_rng = substream(cfg.seed, "train", "augment")

    targets = [[token_to_id[t] for t in item.transcript] for item in corpus]
    history = []
    skipped_total = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(corpus))
        losses = []
        batch = []
        skipped = 0

        def flush(batch):
            if not batch:
                return
            enc.zero_grads()
            for idx, feats in batch:
                logits, _ = enc.forward(feats)
                res = ctc.ctc_loss(logits, targets[idx])
                losses.append(res.loss)
                enc.backward(res.grad / len(batch))
            grads = enc.collect_grads()
            nn.clip_global_norm(grads, cfg.grad_clip)
            params = enc.params
            opt.step(params, grads)
            enc.set_params(params)

        for idx in order:
            item = corpus[idx]
            w = item.waveform
            if cfg.augment:
                noise = noises[int(aug_rng.integers(0, len(noises)))]
                snr = float(aug_rng.uniform(*cfg.snr_range))
                w = mix_at_snr(w, noise, snr, rng=aug_rng)
            feats = prepare_input(w, fb, stft_cfg)
            if enc.output_length(feats.shape[0]) < ctc.min_frames(targets[idx]):
                skipped += 1
                continue
            batch.append((idx, feats))
            if len(batch) == cfg.batch_size:
                flush(batch)
                batch = []
        flush(batch)
        if skipped:
            log.warning("epoch %d: skipped %d CTC-infeasible utterances", epoch, skipped)
        skipped_total += skipped
        if not losses:
            raise ConfigError("every utterance was CTC-infeasible")
        history.append(float(np.mean(losses)))
    return enc, history


# ---------------------------------------------------------------------------
# Extraction and evaluation
# ---------------------------------------------------------------------------

def extract_hidden(enc: Encoder, corpus, layer_tags, out_dir,
                   fb: features.MelFilterbank | None = None,
                   stft_cfg: features.StftConfig | None = None,
                   noises_mixed=None) -> str:
    """Write one HREP file per (utterance, layer); returns manifest path.

    ``noises_mixed`` optionally maps utterance_id -> pre-mixed Waveform
    to extract from degraded inputs instead of the corpus audio.
    """
    fb = fb or features.make_mel()
    stft_cfg = stft_cfg or features.StftConfig()
    known = set(enc.arch.layer_tags())
    layer_tags = list(layer_tags)
    unknown = [t for t in layer_tags if t not in known and t != "features"]
    if unknown:
        raise ConfigError(f"unknown layer tags: {unknown}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for item in sorted(corpus, key=lambda it: it.utterance_id):
        w = item.waveform
        if noises_mixed and item.utterance_id in noises_mixed:
            w = noises_mixed[item.utterance_id]
        feats = prepare_input(w, fb, stft_cfg)
        need_model = any(t != "features" for t in layer_tags)
        hidden = {}
        if need_model:
            _, hidden = enc.forward(feats, capture=True)
        for tag in layer_tags:
            if tag == "features":
                # raw feature dump: unnormalized, so probes on this tag
                # face a near-identity regression
                frames, factor = prepare_input(w, fb, stft_cfg, normalize=False), 1
            else:
                frames, factor = hidden[tag]
            rep = HiddenReps(tag, frames, factor, item.utterance_id, item.speaker_id)
            fname = f"{item.utterance_id}__{tag}.hrep"
            save_hrep(rep, os.path.join(out_dir, fname))
            rows.append((item.utterance_id, tag, fname))
    manifest = os.path.join(out_dir, "hidden_manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        for row in rows:
            f.write("\t".join(row) + "\n")
    return manifest


def eval_wer(enc: Encoder, corpus,
             fb: features.MelFilterbank | None = None,
             stft_cfg: features.StftConfig | None = None):
    """Greedy decode; aggregate WER = total errors / total ref tokens."""
    fb = fb or features.make_mel()
    stft_cfg = stft_cfg or features.StftConfig()
    token_to_id = {t: i + 1 for i, t in enumerate(enc.vocab)}
    per_utt = {}
    total_err = 0
    total_ref = 0
    for item in corpus:
        feats = prepare_input(item.waveform, fb, stft_cfg)
        logits, _ = enc.forward(feats)
        hyp = ctc.greedy_decode(logits)
        ref = [token_to_id[t] for t in item.transcript]
        res = ctc.edit_distance_wer(ref, hyp)
        per_utt[item.utterance_id] = res.wer
        total_err += res.substitutions + res.deletions + res.insertions
        total_ref += len(ref)
    aggregate = total_err / total_ref if total_ref else 0.0
    return per_utt, aggregate
