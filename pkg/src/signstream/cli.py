"""Command-line entry point: ``signstream <command> [--config FILE] [--set key=value ...]``.

Every command reads one JSON experiment config (all fields optional), applies
flag overrides, validates the result and writes the resolved config, with all
defaults filled in, to ``resolved_config.json`` in its output directory.

Exit codes: 0 success, 1 runtime failure (a JSON error report with a
diagnostic path goes to stderr), 2 invalid config (field-level messages).

All randomness derives from the top-level ``seed``.  Each purpose gets its own
sub-seed ``derive_seed(seed, code)`` with the codes in ``SEED_CODES``, so any
stage can be rerun alone and reproduce its part of a full pipeline run.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import adapt
from .adapt import ClassifierHead, DownstreamModel, Hparams, LabeledSet, LayerWeights, TaskBank
from .cluster import (
    assign_all,
    dump_cluster_samples,
    fit_channel_models,
    load_cluster_model,
    save_cluster_model,
)
from .encoder import SHB_MAGIC, EncoderConfig, decode_checkpoint, encode_checkpoint
from .errors import ConfigError, TrainingDiverged
from .featio import CHANNEL_NAMES, _atomic_write, interpolate_all
from .masking import Strategy
from .pretrain import TrainConfig, derive_seed, pretrain
from .report import plot_ablation, plot_training_curves, write_table
from .synthetic import SyntheticSpec, gen_synthetic, list_sequences, load_labels, save_dataset

log = logging.getLogger("signstream")

SCHEMA_VERSION = 1
COMMANDS = (
    "gen-synthetic",
    "kmeans-fit",
    "kmeans-assign",
    "pretrain",
    "extract",
    "finetune",
    "eval",
    "ablate",
    "dump-clusters",
)
SEED_CODES = {
    "world": 1,
    "corpus": 2,
    "train_clips": 3,
    "val_clips": 4,
    "test_clips": 5,
    "cluster": 6,
    "init": 7,
    "train": 8,
    "downstream": 9,
    "lora": 10,
    "dump": 11,
}
RESOLVED_NAME = "resolved_config.json"
# fields that accept null on top of their default's type
NULLABLE = {("train", "grad_clip")}


def sub_seed(seed: int, purpose: str) -> int:
    return derive_seed(seed, SEED_CODES[purpose])


# ---------------------------------------------------------------- sections


@dataclass
class PathsConfig:
    data_dir: str | None = None
    out_dir: str = "runs/out"
    clusters_dir: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None


@dataclass
class SyntheticConfig:
    num_seqs: int = 50
    T_range: list = field(default_factory=lambda: [100, 100])
    num_latent_gestures: int = 5
    dims: list = field(default_factory=lambda: [384, 384, 384, 14])
    palette_size: int = 16
    shared_phases: int = 0
    span_range: list = field(default_factory=lambda: [12, 40])
    noise: float = 0.1
    num_styles: int = 2
    style_scale: float = 0.05
    bump_scale: float = 1.0
    missing_rate: float = 0.0
    frame_rate_hint: float = 14.89
    clip_frames: int = 32
    train_clips: int = 200
    val_clips: int = 100
    test_clips: int = 200
    task: str = "gesture"

    def spec(self, seed: int, world_seed: int, **kw) -> SyntheticSpec:
        base = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(SyntheticSpec)
            if hasattr(self, f.name)
        }
        base.update(seed=seed, world_seed=world_seed)
        base.update(kw)
        return SyntheticSpec(**base)


@dataclass
class ClusterConfig:
    k: int = 256
    fraction: float = 0.1
    max_iters: int = 100
    tol: float = 1e-6
    n_init: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")


@dataclass
class MaskConfig:
    strategy: str = "random"
    ratio: float = 0.4
    span: int = 3

    def __post_init__(self):
        Strategy(self.strategy)
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.span < 1:
            raise ValueError("span must be >= 1")


@dataclass
class AdapterConfig:
    mode: str = "frozen-weighted"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 125
    batch_size: int = 128
    label_smoothing: float = 0.0
    lora_lr_scale: float = 0.1
    patience: int = 10
    reinit_last_block: bool = True

    def __post_init__(self):
        if self.mode not in adapt.MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {list(adapt.MODES)}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")

    def hparams(self, seed: int, **kw) -> Hparams:
        d = dataclasses.asdict(self)
        d.pop("mode")
        d.update(kw)
        return Hparams(seed=seed, **d)


@dataclass
class AblateConfig:
    strategies: list = field(default_factory=lambda: ["channel", "time", "random"])
    modes: list = field(default_factory=lambda: ["frozen-last", "frozen-weighted", "finetune"])

    def __post_init__(self):
        for s in self.strategies:
            Strategy(s)
        for m in self.modes:
            if m not in adapt.MODES:
                raise ValueError(f"unknown mode {m!r}")


@dataclass
class DumpConfig:
    channel: int = 0
    cluster_ids: list | None = None
    n_per_cluster: int = 8


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    for key in ("seed", "mask_strategy", "mask_ratio", "mask_span"):
        d.pop(key)
    return d


SECTIONS = {
    "paths": PathsConfig,
    "synthetic": SyntheticConfig,
    "cluster": ClusterConfig,
    "encoder": EncoderConfig,
    "train": None,  # TrainConfig without seed and mask fields
    "mask": MaskConfig,
    "adapter": AdapterConfig,
    "ablate": AblateConfig,
    "dump": DumpConfig,
}


def _section_defaults(name: str) -> dict:
    if name == "train":
        return _train_defaults()
    obj = SECTIONS[name]()
    return obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)


def default_config() -> dict:
    cfg = {"schema_version": SCHEMA_VERSION, "seed": 0}
    for name in SECTIONS:
        cfg[name] = _section_defaults(name)
    return json.loads(json.dumps(cfg))


def _type_error(value, default) -> str | None:
    if default is None:
        return None
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "string"
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        want = "list"
    else:
        return None
    return None if ok else f"expected {want}, got {json.dumps(value)}"


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises ConfigError listing every bad field."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", ["<root>: expected an object"])
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: unsupported version {version!r}, expected {SCHEMA_VERSION}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(f"seed: expected a non-negative integer, got {json.dumps(seed)}")
    for key in raw:
        if key not in SECTIONS and key not in ("schema_version", "seed"):
            errors.append(f"{key}: unknown section")
    cfg = default_config()
    cfg["seed"] = seed
    for name in SECTIONS:
        given = raw.get(name, {})
        if not isinstance(given, dict):
            errors.append(f"{name}: expected an object")
            continue
        defaults = cfg[name]
        for key, value in given.items():
            if key not in defaults:
                errors.append(f"{name}.{key}: unknown field")
                continue
            problem = None if (value is None and (name, key) in NULLABLE) else _type_error(value, defaults[key])
            if problem:
                errors.append(f"{name}.{key}: {problem}")
                continue
            defaults[key] = float(value) if isinstance(defaults[key], float) and value is not None else value
        try:
            _build_section(name, defaults)
        except (ValueError, TypeError, ConfigError) as exc:
            errors.append(f"{name}: {exc}")
    if errors:
        raise ConfigError("invalid config", errors)
    return json.loads(json.dumps(cfg))


def _build_section(name: str, values: dict):
    if name == "train":
        return TrainConfig(**values)
    if name == "encoder":
        cfg = EncoderConfig.from_dict(values)
        cfg.validate()
        return cfg
    return SECTIONS[name](**values)


@dataclass
class Experiment:
    raw: dict
    seed: int
    paths: PathsConfig
    synthetic: SyntheticConfig
    cluster: ClusterConfig
    encoder: EncoderConfig
    train: TrainConfig
    mask: MaskConfig
    adapter: AdapterConfig
    ablate: AblateConfig
    dump: DumpConfig

    @classmethod
    def from_resolved(cls, cfg: dict) -> "Experiment":
        built = {name: _build_section(name, copy.deepcopy(cfg[name])) for name in SECTIONS}
        return cls(raw=cfg, seed=cfg["seed"], **built)

    def train_config(self, strategy: str | None = None) -> TrainConfig:
        d = dict(self.raw["train"])
        return TrainConfig(
            seed=sub_seed(self.seed, "train"),
            mask_strategy=strategy or self.mask.strategy,
            mask_ratio=self.mask.ratio,
            mask_span=self.mask.span,
            **d,
        )

    @property
    def out(self) -> Path:
        return Path(self.paths.out_dir)


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError("bad override", [f"--set {text}: expected section.field=value"])
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        key, value = _parse_override(text)
        parts = key.split(".")
        if len(parts) == 1:
            raw[parts[0]] = value
        elif len(parts) == 2:
            section = raw.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError("bad override", [f"{parts[0]}: expected an object"])
            section[parts[1]] = value
        else:
            raise ConfigError("bad override", [f"--set {text}: keys are section.field"])
    return raw


def load_config(path, overrides: list[str]) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("config file missing", [f"<file>: {path} does not exist"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config is not JSON", [f"<file>: {exc}"]) from None
    return resolve_config(apply_overrides(raw, overrides))


def _write_resolved(exp: Experiment, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / RESOLVED_NAME, json.dumps(exp.raw, indent=2, sort_keys=True).encode())


# -------------------------------------------------------------------- data


def _need(value, name: str):
    if value is None:
        raise ConfigError("missing path", [f"paths.{name}: required by this command"])
    return value


def load_dir(data_dir) -> tuple[list[str], list]:
    """Sequence file names and interpolated sequences of a dataset directory."""
    paths = list_sequences(_need(data_dir, "data_dir"))
    if not paths:
        raise ConfigError("empty dataset", [f"paths: no .msf files in {data_dir}"])
    from .featio import read_msf

    return [p.name for p in paths], [interpolate_all(read_msf(p)) for p in paths]


def labeled_set(data_dir, input_width_of=None) -> tuple[LabeledSet, dict]:
    """LabeledSet for every task in ``labels.jsonl``; returns it with per-task class counts."""
    names, seqs = load_dir(data_dir)
    label_file = Path(data_dir) / "labels.jsonl"
    if not label_file.exists():
        raise ConfigError("missing labels", [f"paths: {label_file} not found"])
    index = {n: i for i, n in enumerate(names)}
    tasks: dict[str, np.ndarray] = {}
    for rec in load_labels(label_file):
        arr = tasks.setdefault(rec["task"], -np.ones(len(names), dtype=np.int64))
        if rec["sequence"] in index:
            arr[index[rec["sequence"]]] = rec["class_id"]
    counts = {t: int(v.max()) + 1 for t, v in tasks.items()}
    return LabeledSet.from_sequences(seqs, tasks), counts


def load_clusters(clusters_dir) -> list:
    d = Path(_need(clusters_dir, "clusters_dir"))
    return [load_cluster_model(d / f"channel_{c}.kmc") for c in range(4)]


def build_bank(counts: dict, dim: int, smoothing: float) -> TaskBank:
    return TaskBank({t: ClassifierHead(dim, max(2, n), smoothing) for t, n in sorted(counts.items())})


def save_downstream(model: DownstreamModel, counts: dict, path) -> None:
    enc = model.encoder
    doc = {
        "mode": model.mode,
        "tasks": counts,
        "encoder": encode_checkpoint(enc) if enc is not None else None,
        "state_dict": model.state_dict(),
        "input_width": next(iter(model.heads.values())).norm.num_features,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(doc, tmp)
    tmp.replace(path)


def load_downstream(path) -> tuple[DownstreamModel, dict]:
    doc = torch.load(path, weights_only=False)
    enc = decode_checkpoint(doc["encoder"])[0] if doc["encoder"] is not None else None
    bank = build_bank(doc["tasks"], doc["input_width"], 0.0)
    lw = LayerWeights(enc.cfg.n_blocks + 1) if doc["mode"] == "frozen-weighted" else None
    model = DownstreamModel(enc, bank, doc["mode"], lw)
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc["tasks"]


def _is_encoder_checkpoint(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == SHB_MAGIC


# ---------------------------------------------------------------- commands


def _synthetic_world(exp: Experiment):
    world = sub_seed(exp.seed, "world")
    syn = exp.synthetic
    corpus = gen_synthetic(syn.spec(sub_seed(exp.seed, "corpus"), world))
    clips = {}
    for split in ("train", "val", "test"):
        n = getattr(syn, f"{split}_clips")
        spec = syn.spec(
            sub_seed(exp.seed, f"{split}_clips"),
            world,
            num_seqs=n,
            T_range=(syn.clip_frames, syn.clip_frames),
            single_gesture=True,
        )
        clips[split] = gen_synthetic(spec)
    return corpus, clips


def cmd_gen_synthetic(exp: Experiment) -> dict:
    corpus, clips = _synthetic_world(exp)
    rows = []
    for split, ds in [("corpus", corpus)] + list(clips.items()):
        save_dataset(ds, exp.out / split, exp.synthetic.task)
        rows.append(
            {
                "split": split,
                "sequences": len(ds),
                "frames": int(sum(s.num_frames for s in ds.sequences)),
                "classes": int(len(set(ds.labels.tolist()))),
            }
        )
    return write_table(exp.out, "gen_synthetic", rows, ["split", "sequences", "frames", "classes"], "synthetic data")


def cmd_kmeans_fit(exp: Experiment) -> dict:
    _, seqs = load_dir(exp.paths.data_dir)
    cc = exp.cluster
    models = fit_channel_models(
        seqs, cc.k, cc.fraction, sub_seed(exp.seed, "cluster"), max_iters=cc.max_iters, tol=cc.tol, n_init=cc.n_init
    )
    rows = []
    for m in models:
        save_cluster_model(m, exp.out / f"channel_{m.channel_id}.kmc")
        rows.append(
            {
                "channel": CHANNEL_NAMES[m.channel_id],
                "k": m.k,
                "dim": m.dim,
                "iterations": m.n_iter,
                "inertia": float(m.inertia_history[-1]),
                "fraction": float(m.trained_on_fraction),
            }
        )
    cols = ["channel", "k", "dim", "iterations", "inertia", "fraction"]
    return write_table(exp.out, "kmeans_fit", rows, cols, "per-channel k-means")


def cmd_kmeans_assign(exp: Experiment) -> dict:
    names, seqs = load_dir(exp.paths.data_dir)
    models = load_clusters(exp.paths.clusters_dir)
    assigned = {n: assign_all(models, s) for n, s in zip(names, seqs)}
    exp.out.mkdir(parents=True, exist_ok=True)
    np.savez(exp.out / "assignments.npz", **assigned)
    allc = np.concatenate(list(assigned.values()))
    rows = [
        {"channel": CHANNEL_NAMES[c], "frames": int(allc.shape[0]), "clusters_used": int(len(np.unique(allc[:, c])))}
        for c in range(4)
    ]
    return write_table(exp.out, "kmeans_assign", rows, ["channel", "frames", "clusters_used"], "cluster assignments")


def _pretrain_summary(metrics: list) -> list[dict]:
    tail = metrics[-max(1, len(metrics) // 10) :] if metrics else []
    rows = []
    for c in range(4):
        rows.append(
            {
                "channel": CHANNEL_NAMES[c],
                "loss_tail": float(np.mean([m["loss_per_channel"][c] for m in tail])) if tail else float("nan"),
                "acc_tail": float(np.mean([m["acc_per_channel"][c] for m in tail])) if tail else float("nan"),
            }
        )
    return rows


def cmd_pretrain(exp: Experiment) -> dict:
    _, seqs = load_dir(exp.paths.data_dir)
    models = load_clusters(exp.paths.clusters_dir)
    result = pretrain(
        seqs,
        models,
        exp.encoder,
        exp.train_config(),
        out_dir=exp.out,
        resume_from=exp.paths.resume,
        init_seed=sub_seed(exp.seed, "init"),
    )
    paths = write_table(
        exp.out,
        "pretrain",
        _pretrain_summary(result.metrics),
        ["channel", "loss_tail", "acc_tail"],
        f"pretraining, {result.step} steps (mean over last 10% of steps)",
    )
    if result.metrics:
        paths["figure"] = plot_training_curves(result.metrics, exp.out / "training_curves.png")
    return paths


def cmd_extract(exp: Experiment) -> dict:
    names, seqs = load_dir(exp.paths.data_dir)
    ckpt = _need(exp.paths.checkpoint, "checkpoint")
    if _is_encoder_checkpoint(ckpt):
        from .encoder import load_checkpoint

        enc = load_checkpoint(ckpt)[0]
        lw = LayerWeights(enc.cfg.n_blocks + 1)
    else:
        model, _ = load_downstream(ckpt)
        if model.encoder is None:
            raise ConfigError("no encoder", ["paths.checkpoint: downstream model has no encoder"])
        enc = model.encoder
        lw = model.layer_weights or LayerWeights(enc.cfg.n_blocks + 1, _one_hot_last(enc.cfg.n_blocks + 1))
    manifest = adapt.export_features(enc, lw, seqs, exp.out, names)
    rows = [{"written": len(manifest["written"]), "failed": len(manifest["failed"])}]
    return write_table(exp.out, "extract", rows, ["written", "failed"], "feature export")


def _one_hot_last(n: int) -> list[float]:
    w = [0.0] * n
    w[-1] = 30.0
    return w


def _train_probe(exp: Experiment, encoder, mode: str):
    train, counts_tr = labeled_set(_need(exp.paths.train_dir, "train_dir"))
    val, counts_va = labeled_set(_need(exp.paths.val_dir, "val_dir"))
    counts = {t: max(counts_tr.get(t, 0), counts_va.get(t, 0)) for t in set(counts_tr) | set(counts_va)}
    return _fit_downstream(exp, encoder, mode, train, val, counts), counts


def _fit_downstream(exp: Experiment, encoder, mode: str, train: LabeledSet, val: LabeledSet, counts: dict):
    hp = exp.adapter.hparams(sub_seed(exp.seed, "downstream"))
    if mode == "lora" and hp.label_smoothing == 0.0:
        hp = Hparams.lora(**{k: v for k, v in dataclasses.asdict(hp).items() if k != "label_smoothing"})
    enc = copy.deepcopy(encoder) if encoder is not None else None
    if mode == "lora":
        enc.attach_lora(sub_seed(exp.seed, "lora"))
    dim = train.features[0].shape[1] if mode == "none" else enc.cfg.model_dim
    bank = build_bank(counts, dim, hp.label_smoothing)
    return adapt.train_downstream(bank, [train], [val], mode, hp, encoder=enc)


def _load_encoder(exp: Experiment, mode: str):
    if mode == "none":
        return None
    from .encoder import load_checkpoint

    return load_checkpoint(_need(exp.paths.checkpoint, "checkpoint"))[0]


def _eval_rows(model, test: LabeledSet, cache=None) -> list[dict]:
    report = adapt.evaluate(model, [test], ks=(1, 5, 10), cache=cache)
    return [{"task": t, **{k: float(v) for k, v in r.items()}} for t, r in sorted(report.items())]


def cmd_finetune(exp: Experiment) -> dict:
    mode = exp.adapter.mode
    result, counts = _train_probe(exp, _load_encoder(exp, mode), mode)
    save_downstream(result.model, counts, exp.out / "downstream.pt")
    rows = result.history
    paths = write_table(
        exp.out,
        "finetune",
        rows,
        ["epoch", "train_loss", "val_recall@1"],
        f"{mode}: best epoch {result.best_epoch}, validation recall@1 {result.best_score:.4f}",
        extra={"best_epoch": result.best_epoch, "best_score": result.best_score, "mode": mode},
    )
    if exp.paths.test_dir is not None:
        test, _ = labeled_set(exp.paths.test_dir)
        rows = _eval_rows(result.model, test, result.cache)
        paths["test"] = write_table(exp.out, "test", rows, ["task", "recall@1", "recall@5", "recall@10"], "test")
    return paths


def cmd_eval(exp: Experiment) -> dict:
    ckpt = _need(exp.paths.checkpoint, "checkpoint")
    test, _ = labeled_set(exp.paths.test_dir or _need(exp.paths.data_dir, "data_dir"))
    if _is_encoder_checkpoint(ckpt):
        # an encoder checkpoint alone: fit the configured probe first
        mode = exp.adapter.mode
        result, counts = _train_probe(exp, _load_encoder(exp, mode), mode)
        model, cache = result.model, result.cache
    else:
        model, _ = load_downstream(ckpt)
        cache = None
    rows = _eval_rows(model, test, cache)
    return write_table(exp.out, "eval", rows, ["task", "recall@1", "recall@5", "recall@10"], "evaluation")


def cmd_ablate(exp: Experiment) -> dict:
    corpus, clips = _synthetic_world(exp)
    cc = exp.cluster
    models = fit_channel_models(
        corpus.sequences,
        cc.k,
        cc.fraction,
        sub_seed(exp.seed, "cluster"),
        max_iters=cc.max_iters,
        tol=cc.tol,
        n_init=cc.n_init,
    )
    task = exp.synthetic.task
    sets = {s: LabeledSet.from_sequences(d.sequences, {task: d.labels}) for s, d in clips.items()}
    n_classes = exp.synthetic.num_latent_gestures * exp.synthetic.num_styles
    counts = {task: n_classes}
    rows = []
    for strategy in exp.ablate.strategies:
        run_dir = exp.out / f"pretrain_{strategy}"
        result = pretrain(
            corpus.sequences,
            models,
            exp.encoder,
            exp.train_config(strategy),
            out_dir=run_dir,
            init_seed=sub_seed(exp.seed, "init"),
        )
        if result.metrics:
            plot_training_curves(result.metrics, run_dir / "training_curves.png")
        for mode in exp.ablate.modes:
            down = _fit_downstream(exp, result.model, mode, sets["train"], sets["val"], counts)
            scores = _eval_rows(down.model, sets["test"], down.cache)[0]
            rows.append(
                {
                    "strategy": strategy,
                    "mode": mode,
                    "recall@1": scores["recall@1"],
                    "recall@5": scores["recall@5"],
                    "recall@10": scores["recall@10"],
                    "best_epoch": down.best_epoch,
                }
            )
            log.info("ablate %s/%s recall@1=%.4f", strategy, mode, scores["recall@1"])
    cols = ["strategy", "mode", "recall@1", "recall@5", "recall@10", "best_epoch"]
    paths = write_table(exp.out, "ablation", rows, cols, "masking strategy x adaptation mode (test split)")
    paths["figure"] = plot_ablation(rows, exp.out / "ablation.png")
    return paths


def cmd_dump_clusters(exp: Experiment) -> dict:
    names, seqs = load_dir(exp.paths.data_dir)
    models = load_clusters(exp.paths.clusters_dir)
    dc = exp.dump
    if not 0 <= dc.channel < 4:
        raise ConfigError("bad channel", [f"dump.channel: {dc.channel} outside [0, 4)"])
    model = models[dc.channel]
    ids = list(range(model.k)) if dc.cluster_ids is None else [int(i) for i in dc.cluster_ids]
    bad = [i for i in ids if not 0 <= i < model.k]
    if bad:
        raise ConfigError("bad cluster ids", [f"dump.cluster_ids: {bad} outside [0, {model.k})"])
    manifest = dump_cluster_samples(model, seqs, ids, dc.n_per_cluster, sub_seed(exp.seed, "dump"))
    doc = {str(c): [[names[s], t] for s, t in cells] for c, cells in manifest.items()}
    exp.out.mkdir(parents=True, exist_ok=True)
    _atomic_write(exp.out / "cluster_samples.json", json.dumps(doc, indent=2).encode())
    rows = [{"cluster": c, "samples": len(cells)} for c, cells in manifest.items()]
    return write_table(exp.out, "dump_clusters", rows, ["cluster", "samples"], f"{CHANNEL_NAMES[dc.channel]} clusters")


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "kmeans-fit": cmd_kmeans_fit,
    "kmeans-assign": cmd_kmeans_assign,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-clusters": cmd_dump_clusters,
}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signstream", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="shorthand for paths.out_dir")
    p.add_argument("--data", help="shorthand for paths.data_dir")
    p.add_argument("--clusters", help="shorthand for paths.clusters_dir")
    p.add_argument("--checkpoint", help="shorthand for paths.checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _shorthand(args) -> list[str]:
    extra = []
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    for flag, key in (("out", "out_dir"), ("data", "data_dir"), ("clusters", "clusters_dir"), ("checkpoint", "checkpoint")):
        value = getattr(args, flag)
        if value is not None:
            extra.append(f"paths.{key}={json.dumps(value)}")
    return extra


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, indent=2), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolved = load_config(args.config, args.overrides + _shorthand(args))
        exp = Experiment.from_resolved(resolved)
    except ConfigError as exc:
        _error("config", str(exc), fields=list(exc.fields))
        return 2
    out = exp.out
    try:
        _write_resolved(exp, out)
        paths = HANDLERS[args.command](exp)
    except ConfigError as exc:
        _error("config", str(exc), fields=list(exc.fields))
        return 2
    except TrainingDiverged as exc:
        _error("runtime", str(exc), snapshot=exc.snapshot_path)
        return 1
    except Exception as exc:  # noqa: BLE001
        snap = out / "error_report.json"
        try:
            out.mkdir(parents=True, exist_ok=True)
            snap.write_text(json.dumps({"command": args.command, "traceback": traceback.format_exc()}, indent=2))
        except OSError:
            snap = None
        _error("runtime", f"{type(exc).__name__}: {exc}", snapshot=str(snap) if snap else None)
        return 1
    print(json.dumps({"command": args.command, "outputs": paths}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
