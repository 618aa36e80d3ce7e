"""Downstream adaptation: probes, fine-tuning, rank-1 adapters, multi-task heads."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import Encoder, collate, sequence_tensor
from .errors import ConfigError, DataError, FormatError, LengthError, SchemaError
from .featio import MSF_MAGIC, MSF_VERSION, FeatureSequence, _atomic_write

log = logging.getLogger(__name__)

MODES = ("none", "frozen-last", "frozen-weighted", "finetune", "lora")
FROZEN_MODES = ("none", "frozen-last", "frozen-weighted")


class LayerWeights(nn.Module):
    """Softmax-normalized mixture over encoder layers."""

    def __init__(self, n_layers: int, init=None):
        super().__init__()
        raw = torch.zeros(n_layers) if init is None else torch.as_tensor(init, dtype=torch.float32).clone()
        self.raw = nn.Parameter(raw)

    def normalized(self) -> torch.Tensor:
        return torch.softmax(self.raw, dim=0)


def weighted_features(layers, lw) -> torch.Tensor:
    """Convex combination of layer outputs along the first axis.

    ``layers`` is a stacked (L, ..., D) tensor or a list of L tensors; ``lw`` a
    LayerWeights module or a vector of raw (pre-softmax) weights.
    """
    if isinstance(layers, (list, tuple)):
        layers = torch.stack(list(layers))
    w = lw.normalized() if isinstance(lw, LayerWeights) else torch.softmax(torch.as_tensor(lw, dtype=layers.dtype), 0)
    if w.shape[0] != layers.shape[0]:
        raise SchemaError(f"{w.shape[0]} layer weights for {layers.shape[0]} layers")
    w = w.to(layers.dtype)
    return torch.tensordot(w, layers, dims=([0], [0]))


class ClassifierHead(nn.Module):
    """Mean-pooled features -> BatchNorm -> Linear."""

    def __init__(self, dim: int, n_classes: int, label_smoothing: float = 0.0, momentum: float = 0.1):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("a classifier needs at least two classes")
        if not 0.0 <= label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        self.norm = nn.BatchNorm1d(dim, momentum=momentum)
        self.linear = nn.Linear(dim, n_classes)
        self.label_smoothing = label_smoothing
        self.n_classes = n_classes

    def reset_parameters(self):
        self.norm.reset_parameters()
        self.linear.reset_parameters()

    def forward(self, pooled):
        return self.linear(self.norm(pooled))

    def loss(self, logits, labels):
        return F.cross_entropy(logits, labels, label_smoothing=self.label_smoothing)


def smoothed_ce_floor(n_classes: int, smoothing: float) -> float:
    """Entropy of the smoothed target: the least achievable per-example loss."""
    hi = 1.0 - smoothing + smoothing / n_classes
    lo = smoothing / n_classes
    out = -hi * np.log(hi)
    if lo > 0:
        out -= (n_classes - 1) * lo * np.log(lo)
    return float(out)


def pool(x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    """Temporal mean over valid frames: (B, T, D) -> (B, D)."""
    if valid is None:
        return x.mean(dim=1)
    w = valid.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=1) / w.sum(dim=1)


@dataclass
class TaskBank:
    tasks: dict  # name -> ClassifierHead
    loss_weights: dict | None = None

    def __post_init__(self):
        if self.loss_weights is None:
            self.loss_weights = {t: 1.0 for t in self.tasks}
        if sum(self.loss_weights.values()) <= 0:
            raise ConfigError("task loss weights must have a positive sum")


class DownstreamModel(nn.Module):
    """Encoder (optional) + layer mixture + one classifier head per task."""

    def __init__(self, encoder: Encoder | None, bank: TaskBank, mode: str, layer_weights: LayerWeights | None = None):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != "none" and encoder is None:
            raise ConfigError(f"mode {mode} needs an encoder")
        if mode == "lora" and not encoder.has_lora:
            raise ConfigError("lora mode needs adapters attached to the encoder")
        if mode != "lora" and encoder is not None and encoder.has_lora:
            raise ConfigError(f"encoder carries adapters but mode is {mode}")
        self.mode = mode
        self.encoder = encoder
        self.heads = nn.ModuleDict(bank.tasks)
        self.loss_weights = dict(bank.loss_weights)
        if mode == "frozen-weighted" and layer_weights is None:
            layer_weights = LayerWeights(encoder.cfg.n_blocks + 1)
        self.layer_weights = layer_weights
        self.encoder_calls = 0
        self._set_trainable()

    def _set_trainable(self):
        if self.encoder is None:
            return
        for name, p in self.encoder.named_parameters():
            if self.mode == "finetune":
                p.requires_grad_(not name.startswith("heads."))
            elif self.mode == "lora":
                p.requires_grad_(name.endswith(("lora_a", "lora_b")))
            else:
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.encoder is not None and self.mode in FROZEN_MODES:
            self.encoder.eval()
        return self

    def layer_stack(self, x, valid):
        """(L, B, T, D) encoder layers, computed without gradient in frozen modes."""
        self.encoder_calls += 1
        if self.mode in FROZEN_MODES:
            with torch.no_grad():
                return torch.stack(self.encoder.encode(x, None, valid))
        return torch.stack(self.encoder.encode(x, None, valid))

    def pooled_features(self, x, valid):
        if self.mode == "none":
            return pool(x, valid)
        layers = self.layer_stack(x, valid)
        if self.mode == "frozen-weighted":
            return weighted_features(pool_layers(layers, valid), self.layer_weights)
        return pool(layers[-1], valid)

    def forward(self, x, valid=None) -> dict:
        feats = self.pooled_features(x, valid)
        return {t: head(feats) for t, head in self.heads.items()}

    def head_logits(self, feats) -> dict:
        return {t: head(feats) for t, head in self.heads.items()}


def pool_layers(layers: torch.Tensor, valid) -> torch.Tensor:
    """(L, B, T, D) -> (L, B, D); mean pooling commutes with the layer mixture."""
    return torch.stack([pool(layer, valid) for layer in layers])


def classify(encoder, head, seq: FeatureSequence | Sequence[FeatureSequence], mode: str, layer_weights=None):
    """Class logits for one sequence (C,) or a list of sequences (N, C), in eval mode."""
    single = isinstance(seq, FeatureSequence)
    seqs = [seq] if single else list(seq)
    bank = TaskBank({"task": head})
    model = DownstreamModel(encoder, bank, mode, layer_weights)
    model.eval()
    cfg_dims = encoder.cfg if encoder is not None else None
    feats = [
        (sequence_tensor(s, cfg_dims).numpy() if cfg_dims is not None else _raw(s)) for s in seqs
    ]
    batch = collate(feats, dtype=next(head.parameters()).dtype)
    with torch.no_grad():
        logits = model(batch.x, batch.valid)["task"]
    return logits[0] if single else logits


def _raw(seq: FeatureSequence) -> np.ndarray:
    if not seq.presence.all():
        from .errors import PreconditionError

        raise PreconditionError("sequence has absent cells; run interpolate_missing first")
    return seq.concat()


# ------------------------------------------------------------------- metrics


def recall_at_k(logits, labels, k: int) -> float:
    """Fraction of rows whose true label ranks within the top ``k``.

    A class ranks ahead of the true label when its logit is larger, or equal
    with a lower class index.
    """
    logits = np.asarray(logits.detach() if torch.is_tensor(logits) else logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("recall@k is undefined on an empty set of rows")
    if k < 1:
        raise ValueError("k must be >= 1")
    n, C = logits.shape
    true = logits[np.arange(n), labels][:, None]
    idx = np.arange(C)[None, :]
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


# ------------------------------------------------------------------ training


@dataclass
class LabeledSet:
    """Sequences (as (T, width) matrices) with labels for one or more tasks.

    ``labels[task]`` is an int array aligned with ``features``; -1 marks an
    example that carries no label for that task.
    """

    features: list
    labels: dict

    def __len__(self):
        return len(self.features)

    @classmethod
    def from_sequences(cls, seqs: Sequence[FeatureSequence], labels: dict):
        feats = [_raw(s) for s in seqs]
        return cls(feats, {t: np.asarray(v, dtype=np.int64) for t, v in labels.items()})


@dataclass
class Hparams:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 125
    batch_size: int = 128
    label_smoothing: float = 0.0
    lora_lr_scale: float = 0.1
    patience: int = 10
    seed: int = 0
    reinit_last_block: bool = True

    @classmethod
    def phonological(cls, **kw):
        """Same as fine-tuning, without weight decay."""
        kw.setdefault("weight_decay", 0.0)
        return cls(**kw)

    @classmethod
    def lora(cls, **kw):
        kw.setdefault("label_smoothing", 0.1)
        return cls(**kw)


@dataclass
class DownstreamResult:
    model: DownstreamModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("-inf")
    cache: object = None


def _check_labels(sets: Sequence[LabeledSet], bank: TaskBank):
    for s in sets:
        for task, lab in s.labels.items():
            if task not in bank.tasks:
                raise DataError(f"labels given for unknown task {task!r}")
            n = bank.tasks[task].n_classes
            if len(lab) != len(s):
                raise DataError(f"task {task}: {len(lab)} labels for {len(s)} examples")
            if lab.size and (lab.max() >= n or lab.min() < -1):
                raise DataError(f"task {task}: label outside [0, {n})")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


class _FeatureCache:
    """Pooled encoder features for frozen modes, computed once per set."""

    def __init__(self, model: DownstreamModel, chunk: int = 256):
        self.model = model
        self.chunk = chunk
        self._store = {}

    def get(self, s: LabeledSet):
        key = id(s)
        if key not in self._store:
            parts = []
            for lo in range(0, len(s), self.chunk):
                b = collate(s.features[lo : lo + self.chunk])
                if self.model.mode == "none":
                    parts.append(pool(b.x, b.valid))
                else:
                    layers = self.model.layer_stack(b.x, b.valid)
                    if self.model.mode == "frozen-weighted":
                        parts.append(pool_layers(layers, b.valid).transpose(0, 1))  # (B, L, D)
                    else:
                        parts.append(pool(layers[-1], b.valid))
            self._store[key] = torch.cat(parts)
        return self._store[key]

    def features(self, s: LabeledSet, idx):
        cached = self.get(s)[torch.as_tensor(idx)]
        if self.model.mode == "frozen-weighted":
            return weighted_features(cached.transpose(0, 1), self.model.layer_weights)
        return cached


def _set_logits(model: DownstreamModel, s: LabeledSet, idx, cache: _FeatureCache | None) -> dict:
    if cache is not None:
        return model.head_logits(cache.features(s, idx))
    b = collate([s.features[i] for i in idx])
    return model(b.x, b.valid)


def evaluate(model: DownstreamModel, sets: Sequence[LabeledSet], ks=(1, 5, 10), cache=None) -> dict:
    """recall@k per task, pooled over every set that labels the task."""
    model.eval()
    rows: dict = {}
    with torch.no_grad():
        for s in sets:
            idx = np.arange(len(s))
            logits = {}
            for lo in range(0, len(s), 256):
                out = _set_logits(model, s, idx[lo : lo + 256], cache)
                for t, v in out.items():
                    logits.setdefault(t, []).append(v)
            for t, lab in s.labels.items():
                keep = lab >= 0
                if keep.any():
                    lg = torch.cat(logits[t])[torch.from_numpy(keep)]
                    rows.setdefault(t, ([], []))
                    rows[t][0].append(lg.numpy())
                    rows[t][1].append(lab[keep])
    report = {}
    for t, (lgs, labs) in rows.items():
        lg, lab = np.concatenate(lgs), np.concatenate(labs)
        report[t] = {f"recall@{k}": recall_at_k(lg, lab, k) for k in ks}
    return report


def train_downstream(
    bank: TaskBank,
    train_sets: Sequence[LabeledSet],
    val_sets: Sequence[LabeledSet],
    mode: str,
    hparams: Hparams | None = None,
    encoder: Encoder | None = None,
    layer_weights: LayerWeights | None = None,
) -> DownstreamResult:
    """Train heads (and encoder or adapters, per ``mode``) with early stopping.

    Every step draws one batch from each training set, runs the encoder once
    per batch, and sums the label-smoothed cross-entropy of every task the set
    labels, weighted by the bank's loss weights.  Validation recall@1 (mean
    over tasks) is checked after each epoch; the best state is restored.
    """
    hp = hparams or Hparams()
    _check_labels(list(train_sets) + list(val_sets), bank)
    if not val_sets or sum(len(s) for s in val_sets) == 0:
        raise ConfigError("an empty validation split cannot drive early stopping")
    torch.manual_seed(hp.seed)
    # heads start from the training seed, not from whatever state the global
    # generator had when they were constructed
    for name in sorted(bank.tasks):
        bank.tasks[name].reset_parameters()
        bank.tasks[name].label_smoothing = hp.label_smoothing
    if mode == "finetune" and hp.reinit_last_block and encoder is not None and encoder.cfg.n_blocks > 0:
        encoder.reinit_block(-1, hp.seed)
    model = DownstreamModel(encoder, bank, mode, layer_weights)
    head_params = [p for n, p in model.named_parameters() if not n.startswith("encoder.")]
    groups = [{"params": head_params, "lr": hp.lr}]
    if mode == "finetune":
        groups.append({"params": [p for p in encoder.parameters() if p.requires_grad], "lr": hp.lr})
    elif mode == "lora":
        groups.append({"params": [p for p in encoder.parameters() if p.requires_grad], "lr": hp.lr * hp.lora_lr_scale})
    opt = torch.optim.Adam(groups, weight_decay=hp.weight_decay)
    cache = _FeatureCache(model) if mode in FROZEN_MODES else None
    rng = np.random.default_rng(hp.seed)
    result = DownstreamResult(model)
    best_state, since_best = None, 0
    for epoch in range(hp.epochs):
        model.train()
        plans = [_batches(len(s), hp.batch_size, rng) for s in train_sets]
        for step in range(max(len(p) for p in plans)):
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for s, plan in zip(train_sets, plans):
                idx = plan[step % len(plan)]
                out = _set_logits(model, s, idx, cache)
                for t, lab in s.labels.items():
                    y = torch.from_numpy(lab[idx])
                    keep = y >= 0
                    if keep.sum() == 0:
                        continue
                    head = model.heads[t]
                    total = total + model.loss_weights[t] * head.loss(out[t][keep], y[keep])
            total.backward()
            opt.step()
        scores = evaluate(model, val_sets, ks=(1,), cache=cache)
        score = float(np.mean([v["recall@1"] for v in scores.values()]))
        result.history.append({"epoch": epoch, "val_recall@1": score, "train_loss": float(total.detach())})
        if score > result.best_score:
            result.best_score, result.best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= hp.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.cache = cache
    return result


# ------------------------------------------------------------ phonology table


def load_phonology_table(path=None, dataset: str = "semlex") -> dict:
    """Feature name -> class count; defaults to the bundled table."""
    if path is None:
        text = resources.files("signstream").joinpath("data/phonology_classes.json").read_text()
    else:
        text = Path(path).read_text()
    table = json.loads(text)
    if dataset not in table:
        raise ConfigError(f"no column {dataset!r} in phonology table; have {sorted(table)}")
    return {k: int(v) for k, v in table[dataset].items()}


def phonology_bank(dim: int, table: dict | None = None) -> TaskBank:
    table = table or load_phonology_table()
    return TaskBank({name.replace(" ", "_").lower(): ClassifierHead(dim, n) for name, n in table.items()})


# -------------------------------------------------------------------- export


def encode_feature_matrix(mat: np.ndarray, frame_rate_hint: float = 0.0) -> bytes:
    """Single-channel MSF variant: num_channels=1, one dim, presence all ones."""
    mat = np.ascontiguousarray(mat, dtype="<f4")
    T, D = mat.shape
    head = struct.pack("<4sIII", MSF_MAGIC, MSF_VERSION, 1, D) + struct.pack("<Qf", T, frame_rate_hint)
    return head + np.ones(T, dtype=np.uint8).tobytes() + mat.tobytes()


def decode_feature_matrix(data: bytes) -> tuple[np.ndarray, float]:
    if len(data) < 28:
        raise LengthError("file shorter than the single-channel header")
    magic, version, nch, D = struct.unpack_from("<4sIII", data)
    if magic != MSF_MAGIC or version != MSF_VERSION:
        raise FormatError("not an MSF version 1 file")
    if nch != 1:
        raise SchemaError(f"expected a single-channel file, got {nch} channels")
    T, fps = struct.unpack_from("<Qf", data, 16)
    need = 28 + T + 4 * T * D
    if len(data) != need:
        raise LengthError(f"expected {need} bytes, got {len(data)}")
    mat = np.frombuffer(data, dtype="<f4", offset=28 + T).reshape(T, D).astype(np.float32)
    return mat, float(fps)


@torch.no_grad()
def export_features(encoder: Encoder, layer_weights, dataset: Sequence[FeatureSequence], out_dir, names=None) -> dict:
    """Write one (T, model_dim) layer-mixture file per sequence plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder.eval()
    names = names or [f"feat_{i:05d}.msf" for i in range(len(dataset))]
    manifest = {"written": [], "failed": []}
    for name, seq in zip(names, dataset):
        path = out_dir / name
        try:
            x = sequence_tensor(seq, encoder.cfg)[None]
            layers = torch.stack(encoder.encode(x))[:, 0]
            mixed = weighted_features(layers, layer_weights)
            _atomic_write(path, encode_feature_matrix(mixed.numpy(), seq.frame_rate_hint))
            manifest["written"].append(name)
        except (OSError, ValueError) as exc:
            manifest["failed"].append({"file": name, "error": str(exc)})
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2).encode())
    return manifest
