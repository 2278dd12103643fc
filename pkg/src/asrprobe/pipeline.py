"""Reproducible pipeline stages over a run directory.

Every stage is deterministic given the configuration's root seed, writes
through ``.partial`` temporaries, and validates that its upstream
artifacts exist before doing any work.
"""

import configparser
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import asr, audio, ctc, evaluate, features, nn, probe
from .errors import ConfigError, IncompleteRunError, MissingArtifactError
from .hrep import load_hrep, save_hrep
from .seeding import substream

BASELINE = "baseline"
ROBUST = "robust"


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    models: list = field(default_factory=lambda: [BASELINE, ROBUST])
    arch_kind: str = asr.PURE_RECURRENT
    hidden: int = 48
    layers: list = field(default_factory=lambda: [f"blstm{i}" for i in range(1, 6)])
    conditions: list = field(default_factory=lambda: ["clean", "snr0"])
    # corpus
    n_speakers: int = 4
    train_utts: int = 6
    eval_utts: int = 4
    tokens_per_utt: int = 4
    vocab_size: int = 6
    sample_rate: int = 16000
    # asr training
    asr_epochs: int = 50
    asr_batch: int = 4
    asr_lr: float = 3e-3
    aug_snr_lo: float = 0.0
    aug_snr_hi: float = 20.0
    # probe training
    probe_epochs: int = 40
    probe_batch: int = 8
    probe_lr: float = 2e-3
    # evaluation
    pairs_per_class: int = 20
    n_triplets: int = 10
    gl_iters: int = 60


_SECTIONS = {
    "run": {"seed": int, "models": "csv", "arch": str, "layers": "csv",
            "conditions": "csv", "hidden": int},
    "corpus": {"n_speakers": int, "train_utts": int, "eval_utts": int,
               "tokens_per_utt": int, "vocab_size": int, "sample_rate": int},
    "asr": {"epochs": int, "batch_size": int, "lr": float,
            "aug_snr_lo": float, "aug_snr_hi": float},
    "probe": {"epochs": int, "batch_size": int, "lr": float},
    "eval": {"pairs_per_class": int, "n_triplets": int, "gl_iters": int},
}

_KEYMAP = {
    ("run", "arch"): "arch_kind",
    ("asr", "epochs"): "asr_epochs",
    ("asr", "batch_size"): "asr_batch",
    ("asr", "lr"): "asr_lr",
    ("probe", "epochs"): "probe_epochs",
    ("probe", "batch_size"): "probe_batch",
    ("probe", "lr"): "probe_lr",
}


def parse_config(path, out_dir) -> RunConfig:
    """Parse the sectioned key-value run configuration.

    Collects every violation before failing so a bad file is fixed in
    one pass. The seed has no default on purpose.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc

    problems = []
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser[section].items():
            if key not in _SECTIONS[section]:
                problems.append(f"unknown key {key!r} in [{section}]")
                continue
            conv = _SECTIONS[section][key]
            attr = _KEYMAP.get((section, key), key)
            try:
                if conv == "csv":
                    values[attr] = [v.strip() for v in raw.split(",") if v.strip()]
                else:
                    values[attr] = conv(raw)
            except ValueError:
                problems.append(f"[{section}] {key}: cannot parse {raw!r}")

    if "seed" not in values:
        problems.append("[run] seed is mandatory")
    cfg = None
    if not problems:
        cfg = RunConfig(seed=values.pop("seed"), out_dir=out_dir, **values)
        for m in cfg.models:
            if m not in (BASELINE, ROBUST):
                problems.append(f"unknown model {m!r}")
        if cfg.arch_kind not in (asr.PURE_RECURRENT, asr.CONV_FRONT_END):
            problems.append(f"unknown arch {cfg.arch_kind!r}")
        for c in cfg.conditions:
            if c != "clean" and not c.startswith("snr"):
                problems.append(f"unknown condition {c!r} (use clean or snr<dB>)")
        known = set(asr.EncoderArch(cfg.arch_kind).layer_tags()) | {"features"}
        for tag in cfg.layers:
            if tag not in known:
                problems.append(f"unknown layer tag {tag!r} for arch {cfg.arch_kind}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


# ---------------------------------------------------------------------------
# Layout, locking, atomic writes
# ---------------------------------------------------------------------------

class Paths:
    def __init__(self, out_dir):
        self.root = out_dir
        self.train_manifest = os.path.join(out_dir, "corpus", "train", "manifest.tsv")
        self.eval_manifest = os.path.join(out_dir, "corpus", "eval", "manifest.tsv")
        self.noise_dir = os.path.join(out_dir, "corpus", "noise")
        self.models_dir = os.path.join(out_dir, "models")
        self.hidden_dir = os.path.join(out_dir, "hidden")
        self.probes_dir = os.path.join(out_dir, "probes")
        self.recon_dir = os.path.join(out_dir, "recon")
        self.eval_dir = os.path.join(out_dir, "eval")
        self.hashes = os.path.join(out_dir, "hashes.json")
        self.lock = os.path.join(out_dir, "run.lock")

    def eval_cond_manifest(self, condition):
        if condition == "clean":
            return self.eval_manifest
        return os.path.join(self.root, "corpus", f"eval_{condition}", "manifest.tsv")

    def ckpt(self, model):
        return os.path.join(self.models_dir, f"{model}.ckpt")

    def hidden_set(self, model, split_condition):
        return os.path.join(self.hidden_dir, model, split_condition)

    def probe_ckpt(self, model, layer):
        return os.path.join(self.probes_dir, model, f"{layer}.ckpt")

    def recon(self, model, condition, layer):
        return os.path.join(self.recon_dir, model, condition, layer)


@contextmanager
def run_lock(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, "run.lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"{out_dir} is locked by another invocation (remove run.lock if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


@contextmanager
def atomic(path):
    """Yield a temporary path that replaces ``path`` on success."""
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".partial"
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _require(path, producer):
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"missing artifact {path}; run `{producer}` first", producer=producer
        )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

NOISE_KINDS = ("babble", "music", "white")


def stage_synth_corpus(cfg: RunConfig) -> None:
    """Train and eval splits of the synthetic corpus, plus noise signals."""
    p = Paths(cfg.out_dir)
    vocab = [f"t{i}" for i in range(cfg.vocab_size)]
    spec = audio.CorpusSpec(
        vocab=vocab, n_speakers=cfg.n_speakers,
        utterances_per_speaker=cfg.train_utts + cfg.eval_utts,
        tokens_per_utterance=cfg.tokens_per_utt, seed=cfg.seed,
        sample_rate_hz=cfg.sample_rate,
    )
    items = audio.synth_corpus(spec)
    per_speaker = cfg.train_utts + cfg.eval_utts
    train, evald = [], []
    for i, item in enumerate(items):
        (train if i % per_speaker < cfg.train_utts else evald).append(item)
    audio.save_corpus(train, os.path.dirname(p.train_manifest))
    audio.save_corpus(evald, os.path.dirname(p.eval_manifest))
    os.makedirs(p.noise_dir, exist_ok=True)
    duration = max(2.0, items[0].waveform.duration_s * 2)
    for kind in NOISE_KINDS:
        w = audio.synth_noise(kind, duration, cfg.seed, cfg.sample_rate)
        with atomic(os.path.join(p.noise_dir, f"{kind}.wav")) as tmp:
            audio.write_wav(w, tmp)
    # eval-time noise: same family, distinct instance
    w = audio.synth_noise("music", duration, cfg.seed + 1, cfg.sample_rate)
    with atomic(os.path.join(p.noise_dir, "eval_music.wav")) as tmp:
        audio.write_wav(w, tmp)


def _load_noises(p: Paths) -> list:
    return [audio.read_wav(os.path.join(p.noise_dir, f"{k}.wav"))
            for k in NOISE_KINDS]


def stage_mix_noise(cfg: RunConfig) -> None:
    """Noisy eval sets at each configured SNR condition."""
    p = Paths(cfg.out_dir)
    _require(p.eval_manifest, "synth-corpus")
    noise_path = os.path.join(p.noise_dir, "eval_music.wav")
    _require(noise_path, "synth-corpus")
    noise = audio.read_wav(noise_path)
    evald = audio.load_corpus(p.eval_manifest)
    for condition in cfg.conditions:
        if condition == "clean":
            continue
        snr_db = float(condition[len("snr"):])
        mixed = []
        for item in evald:
            rng = substream(cfg.seed, "crop", condition, item.utterance_id)
            w = audio.mix_at_snr(item.waveform, noise, snr_db, rng=rng)
            peak = np.max(np.abs(w.samples))
            if peak > 1.0:
                w = audio.Waveform(w.samples / peak, w.sample_rate_hz)
            mixed.append(audio.CorpusItem(w, item.transcript, item.speaker_id,
                                          item.utterance_id))
        audio.save_corpus(mixed, os.path.dirname(p.eval_cond_manifest(condition)))


def _train_seed(cfg, *tags) -> int:
    return int(substream(cfg.seed, *tags).integers(2 ** 31))


def stage_train_asr(cfg: RunConfig) -> None:
    p = Paths(cfg.out_dir)
    _require(p.train_manifest, "synth-corpus")
    corpus = audio.load_corpus(p.train_manifest)
    noises = _load_noises(p) if ROBUST in cfg.models else None
    for model in cfg.models:
        arch = asr.EncoderArch(kind=cfg.arch_kind, hidden=cfg.hidden)
        tcfg = asr.TrainConfig(
            epochs=cfg.asr_epochs, batch_size=cfg.asr_batch, lr=cfg.asr_lr,
            seed=_train_seed(cfg, "train-asr", model),
            augment=(model == ROBUST),
            snr_range=(cfg.aug_snr_lo, cfg.aug_snr_hi),
        )
        enc, history = asr.train_asr(corpus, arch, tcfg,
                                     noises=noises if model == ROBUST else None)
        with atomic(p.ckpt(model)) as tmp:
            nn.save_checkpoint(enc.params, enc.descriptor(), tmp)
        with atomic(p.ckpt(model) + ".history.json") as tmp:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(history, f)


def stage_extract_hidden(cfg: RunConfig) -> None:
    """Hidden reps for probe training (train/clean) and eval conditions."""
    p = Paths(cfg.out_dir)
    for model in cfg.models:
        _require(p.ckpt(model), "train-asr")
        enc = asr.encoder_from_checkpoint(p.ckpt(model))
        train = audio.load_corpus(p.train_manifest)
        asr.extract_hidden(enc, train, cfg.layers, p.hidden_set(model, "train_clean"))
        for condition in cfg.conditions:
            manifest = p.eval_cond_manifest(condition)
            _require(manifest, "mix-noise" if condition != "clean" else "synth-corpus")
            evald = audio.load_corpus(manifest)
            asr.extract_hidden(enc, evald, cfg.layers,
                               p.hidden_set(model, f"eval_{condition}"))


def _load_hidden_set(dirpath, layer) -> list:
    _require(os.path.join(dirpath, "hidden_manifest.tsv"), "extract-hidden")
    reps = []
    with open(os.path.join(dirpath, "hidden_manifest.tsv"), encoding="utf-8") as f:
        for line in f:
            utt, tag, fname = line.rstrip("\n").split("\t")
            if tag == layer:
                reps.append(load_hrep(os.path.join(dirpath, fname)))
    return reps


def _mel_targets(manifest_path) -> dict:
    fb = features.make_mel()
    scfg = features.StftConfig()
    corpus = audio.load_corpus(manifest_path)
    return {item.utterance_id: features.logmel(item.waveform, fb, scfg).static
            for item in corpus}


def stage_train_probe(cfg: RunConfig) -> None:
    p = Paths(cfg.out_dir)
    _require(p.train_manifest, "synth-corpus")
    targets = _mel_targets(p.train_manifest)
    for model in cfg.models:
        for layer in cfg.layers:
            reps = _load_hidden_set(p.hidden_set(model, "train_clean"), layer)
            pcfg = probe.ProbeTrainConfig(
                epochs=cfg.probe_epochs, batch_size=cfg.probe_batch,
                lr=cfg.probe_lr, seed=_train_seed(cfg, "train-probe", model, layer),
            )
            dec, history = probe.train_probe(reps, targets, pcfg)
            with atomic(p.probe_ckpt(model, layer)) as tmp:
                dec.save(tmp)
            with atomic(p.probe_ckpt(model, layer) + ".history.json") as tmp:
                with open(tmp, "w", encoding="utf-8") as f:
                    json.dump(history, f)


def stage_reconstruct(cfg: RunConfig) -> None:
    """Audify eval-set hidden reps through each trained probe."""
    p = Paths(cfg.out_dir)
    fb = features.make_mel()
    scfg = features.StftConfig()
    for model in cfg.models:
        for layer in cfg.layers:
            _require(p.probe_ckpt(model, layer), "train-probe")
            dec = probe.probe_from_checkpoint(p.probe_ckpt(model, layer))
            for condition in cfg.conditions:
                reps = _load_hidden_set(p.hidden_set(model, f"eval_{condition}"), layer)
                out_dir = p.recon(model, condition, layer)
                os.makedirs(out_dir, exist_ok=True)
                for rep in reps:
                    mel = dec.reconstruct(rep)
                    wav = probe.audify(mel, fb, scfg, iters=cfg.gl_iters,
                                       sample_rate_hz=cfg.sample_rate)
                    peak = np.max(np.abs(wav.samples))
                    if peak > 0:
                        wav = audio.Waveform(0.5 * wav.samples / peak,
                                             wav.sample_rate_hz)
                    with atomic(os.path.join(out_dir, rep.utterance_id + ".wav")) as tmp:
                        audio.write_wav(wav, tmp)
                    rep_out = type(rep)(layer, mel.static, rep.downsample_factor,
                                        rep.utterance_id, rep.speaker_id)
                    with atomic(os.path.join(out_dir, rep.utterance_id + ".mel.hrep")) as tmp:
                        save_hrep(rep_out, tmp)


def _recon_items(p: Paths, model, condition, layer):
    out_dir = p.recon(model, condition, layer)
    _require(out_dir, "reconstruct")
    evald = audio.load_corpus(p.eval_manifest)
    items = []
    for item in evald:
        wav_path = os.path.join(out_dir, item.utterance_id + ".wav")
        _require(wav_path, "reconstruct")
        items.append((item, audio.read_wav(wav_path)))
    return items


def stage_eval_stoi(cfg: RunConfig) -> None:
    """Mean STOI of reconstructions against the clean eval reference."""
    p = Paths(cfg.out_dir)
    _require(p.eval_manifest, "synth-corpus")
    rows = []
    for model in cfg.models:
        for condition in cfg.conditions:
            for layer in cfg.layers:
                vals = [evaluate.stoi_trimmed(item.waveform, recon)
                        for item, recon in _recon_items(p, model, condition, layer)]
                rows.append((layer, "stoi", f"{model}/{condition}",
                             float(np.mean(vals))))
    with atomic(os.path.join(p.eval_dir, "stoi.csv")) as tmp:
        evaluate.write_report_csv(rows, tmp)


def stage_eval_eer(cfg: RunConfig) -> None:
    """Speaker-verification EER on reconstructed audio, within-condition."""
    p = Paths(cfg.out_dir)
    _require(p.eval_manifest, "synth-corpus")
    fb = features.make_mel()
    scfg = features.StftConfig()
    evald = audio.load_corpus(p.eval_manifest)
    metadata = [(item.utterance_id, item.speaker_id) for item in evald]
    rows = []
    for model in cfg.models:
        for condition in cfg.conditions:
            pairs = evaluate.sample_pairs(metadata, cfg.pairs_per_class,
                                          cfg.seed, condition=condition)
            for layer in cfg.layers:
                embeddings = {}
                for item, recon in _recon_items(p, model, condition, layer):
                    mel = features.logmel(recon, fb, scfg)
                    embeddings[item.utterance_id] = evaluate.embed_speaker(mel)
                scored = [
                    evaluate.ScoredPair(
                        q.utt_a, q.utt_b, q.label,
                        evaluate.cosine(embeddings[q.utt_a], embeddings[q.utt_b]),
                        q.condition)
                    for q in pairs
                ]
                result = evaluate.compute_eer(scored)
                rows.append((layer, "eer", f"{model}/{condition}", result["eer"]))
                name = f"scores_{model}_{condition}_{layer}.csv"
                with atomic(os.path.join(p.eval_dir, name)) as tmp:
                    evaluate.write_scores_csv(scored, tmp)
    with atomic(os.path.join(p.eval_dir, "eer.csv")) as tmp:
        evaluate.write_report_csv(rows, tmp)
    # listening-study triplet export
    triplets = evaluate.sample_triplets(metadata, cfg.n_triplets, cfg.seed)
    with atomic(os.path.join(p.eval_dir, "triplets.tsv")) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            for a, b, c in triplets:
                f.write(f"{a}\t{b}\t{c}\n")


def _read_report_csv(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            layer, metric, condition, value = line.rstrip("\n").split(",")
            rows.append((layer, metric, condition, float(value)))
    return rows


def layer_trend_report(cfg: RunConfig) -> dict:
    """Aggregate metrics and Spearman-vs-depth statistics per condition.

    Emits eval/report.csv (layer, metric, condition, value) and a plain
    text summary; returns the aggregated structure for callers.
    """
    p = Paths(cfg.out_dir)
    for fname, producer in (("stoi.csv", "eval-stoi"), ("eer.csv", "eval-eer")):
        _require(os.path.join(p.eval_dir, fname), producer)

    missing = []
    for model in cfg.models:
        for condition in cfg.conditions:
            for layer in cfg.layers:
                if not os.path.isdir(p.recon(model, condition, layer)):
                    missing.append(f"{model}/{condition}/{layer}")
    if missing:
        raise IncompleteRunError(f"missing reconstructions for: {missing}")

    rows = _read_report_csv(os.path.join(p.eval_dir, "stoi.csv"))
    rows += _read_report_csv(os.path.join(p.eval_dir, "eer.csv"))

    # mean L1 of reconstructed mels vs clean eval targets
    targets = _mel_targets(p.eval_manifest)
    for model in cfg.models:
        for condition in cfg.conditions:
            for layer in cfg.layers:
                out_dir = p.recon(model, condition, layer)
                total, cells = 0.0, 0
                for utt, tgt in targets.items():
                    rep = load_hrep(os.path.join(out_dir, utt + ".mel.hrep"))
                    pred = rep.frames[:tgt.shape[0]]
                    tgt = tgt[:pred.shape[0]]
                    total += float(np.abs(pred - tgt).sum())
                    cells += tgt.size
                rows.append((layer, "l1", f"{model}/{condition}", total / cells))

    layer_index = {tag: i for i, tag in enumerate(cfg.layers)}
    report = {}
    lines = []
    for model in cfg.models:
        for condition in cfg.conditions:
            key = f"{model}/{condition}"
            entry = {"layers": cfg.layers, "spearman": {}}
            for metric in ("eer", "stoi", "l1"):
                series = sorted(
                    [(layer_index[r[0]], r[3]) for r in rows
                     if r[1] == metric and r[2] == key])
                vals = [v for _, v in series]
                entry[metric] = vals
                rho = evaluate.spearman([i for i, _ in series], vals)
                entry["spearman"][metric] = rho
                lines.append(f"{key} {metric}: " +
                             " ".join(f"{v:.4f}" for v in vals) +
                             f" | spearman_vs_depth={rho:+.3f}")
            report[key] = entry

    with atomic(os.path.join(p.eval_dir, "report.csv")) as tmp:
        evaluate.write_report_csv(sorted(rows), tmp)
    with atomic(os.path.join(p.eval_dir, "summary.txt")) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    return report


# ---------------------------------------------------------------------------
# Hash manifest and full runs
# ---------------------------------------------------------------------------

def _hash_tree(root) -> dict:
    hashes = {}
    for dirpath, _, filenames in os.walk(root):
        for fname in sorted(filenames):
            if fname in ("hashes.json", "run.lock") or fname.endswith(".partial"):
                continue
            full = os.path.join(dirpath, fname)
            rel = os.path.relpath(full, root)
            with open(full, "rb") as f:
                hashes[rel] = hashlib.sha256(f.read()).hexdigest()
    return hashes


def write_hashes(cfg: RunConfig) -> None:
    p = Paths(cfg.out_dir)
    with atomic(p.hashes) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(_hash_tree(cfg.out_dir), f, indent=0, sort_keys=True)


def verify_hashes(cfg: RunConfig) -> list:
    """Recompute artifact hashes; returns mismatched relative paths."""
    p = Paths(cfg.out_dir)
    _require(p.hashes, "run-all")
    with open(p.hashes, encoding="utf-8") as f:
        recorded = json.load(f)
    current = _hash_tree(cfg.out_dir)
    keys = set(recorded) | set(current)
    return sorted(k for k in keys if recorded.get(k) != current.get(k))


STAGES = [
    ("synth-corpus", stage_synth_corpus),
    ("mix-noise", stage_mix_noise),
    ("train-asr", stage_train_asr),
    ("extract-hidden", stage_extract_hidden),
    ("train-probe", stage_train_probe),
    ("reconstruct", stage_reconstruct),
    ("eval-stoi", stage_eval_stoi),
    ("eval-eer", stage_eval_eer),
]


def run_all(cfg: RunConfig) -> dict:
    """Full pipeline; returns the trend report."""
    for _, fn in STAGES:
        fn(cfg)
    report = layer_trend_report(cfg)
    write_hashes(cfg)
    return report
