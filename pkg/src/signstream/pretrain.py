"""Masked cluster-prediction pretraining loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cluster import ClusterModel, assign_all
from .encoder import (
    Encoder,
    EncoderConfig,
    build_encoder,
    collate,
    decode_checkpoint,
    encode_checkpoint,
    masked_ce_loss,
    sequence_tensor,
)
from .errors import SchemaError, TrainingDiverged
from .featio import FeatureSequence, _atomic_write
from .masking import make_mask_plan

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 2000
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.08
    frame_budget: int = 1500
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0
    mask_strategy: str = "random"
    mask_ratio: float = 0.4
    mask_span: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.total_steps < 0 or self.frame_budget < 1:
            raise ValueError("total_steps must be >= 0 and frame_budget >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def warmup_steps(cfg: TrainConfig) -> int:
    return int(math.floor(cfg.warmup_fraction * cfg.total_steps))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to peak over the first floor(f*N) steps, then linear decay to 0 at N."""
    N = cfg.total_steps
    if not 0 <= step <= N:
        raise ValueError(f"step {step} outside [0, {N}]")
    W = warmup_steps(cfg)
    if step < W:
        return cfg.peak_lr * step / W
    if N == W:
        return cfg.peak_lr if step == W and N > 0 else 0.0
    return cfg.peak_lr * (N - step) / (N - W)


def derive_seed(*parts: int) -> int:
    """Deterministic 63-bit sub-seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & (2**64 - 1) for p in parts]).generate_state(1, np.uint64)[0]) >> 1


def make_batches(lengths: Sequence[int], frame_budget: int, seed: int) -> list[list[tuple[int, int, int]]]:
    """Greedy frame-budget packing of a shuffled dataset.

    Sequences longer than the budget are cut into budget-sized windows first.
    Each batch is a list of ``(sequence index, start, stop)`` windows whose
    lengths sum to at most ``frame_budget``; every frame appears exactly once.
    """
    if frame_budget < 1:
        raise ValueError("frame_budget must be >= 1")
    if len(lengths) == 0:
        return []
    order = np.random.default_rng(seed & (2**64 - 1)).permutation(len(lengths))
    batches, current, used = [], [], 0
    for i in order:
        L = int(lengths[i])
        for start in range(0, L, frame_budget):
            stop = min(L, start + frame_budget)
            n = stop - start
            if current and used + n > frame_budget:
                batches.append(current)
                current, used = [], 0
            current.append((int(i), start, stop))
            used += n
    if current:
        batches.append(current)
    return batches


class BatchStream:
    """Endless, restartable batch schedule: epoch e is make_batches(seed_e)."""

    def __init__(self, lengths, frame_budget, seed):
        self.lengths = list(lengths)
        self.frame_budget = frame_budget
        self.seed = seed
        self._cache: dict[int, list] = {}

    def epoch(self, e: int):
        if e not in self._cache:
            self._cache = {e: make_batches(self.lengths, self.frame_budget, derive_seed(self.seed, 0xBA7C, e))}
        return self._cache[e]

    def at(self, step: int):
        e, s = 0, step
        while s >= len(self.epoch(e)):
            s -= len(self.epoch(e))
            e += 1
        return self.epoch(e)[s]


@dataclass
class PretrainResult:
    model: Encoder
    metrics: list = field(default_factory=list)
    step: int = 0
    optimizer_state: dict | None = None


def _validate_inputs(dataset, cluster_models, enc_cfg: EncoderConfig):
    if len(dataset) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    if len(cluster_models) != 4:
        raise SchemaError("need one cluster model per channel")
    for c, m in enumerate(cluster_models):
        if m.k != enc_cfg.k_per_channel:
            raise SchemaError(f"cluster model {c} has k={m.k}, encoder heads predict {enc_cfg.k_per_channel}")
        if m.dim != enc_cfg.channel_dims[c]:
            raise SchemaError(f"cluster model {c} has dim {m.dim}, channel dim is {enc_cfg.channel_dims[c]}")


def _make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=0.0, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def _grids_for(windows, step: int, cfg: TrainConfig):
    return [
        make_mask_plan(
            stop - start, cfg.mask_strategy, cfg.mask_ratio, cfg.mask_span, derive_seed(cfg.seed, 0x3A5C, step, j)
        ).grid
        for j, (_, start, stop) in enumerate(windows)
    ]


def pretrain(
    dataset: Sequence[FeatureSequence],
    cluster_models: Sequence[ClusterModel],
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
    init_seed: int | None = None,
) -> PretrainResult:
    """Train the encoder to predict masked cluster ids.

    Each step draws the next frame-budget batch, fresh mask plans, computes the
    masked loss, clips the global gradient norm (unless ``grad_clip`` is None)
    and applies Adam at ``lr_at(step)``.  Metrics are one record per step.
    ``resume_from`` is a training-state file written by a previous run;
    ``stop_at`` ends the run early (the schedule still spans ``total_steps``).
    """
    _validate_inputs(dataset, cluster_models, enc_cfg)
    torch.manual_seed(train_cfg.seed)
    features = [sequence_tensor(s, enc_cfg).numpy() for s in dataset]
    targets = [assign_all(cluster_models, s) for s in dataset]
    stream = BatchStream([len(f) for f in features], train_cfg.frame_budget, train_cfg.seed)

    if resume_from is not None:
        state = torch.load(resume_from, weights_only=False)
        model, _ = decode_checkpoint(state["checkpoint"])
        step = int(state["step"])
        metrics = list(state["metrics"])
        opt = _make_optimizer(model, train_cfg)
        opt.load_state_dict(state["optimizer"])
    else:
        seed = derive_seed(train_cfg.seed, 0x1417) if init_seed is None else init_seed
        model = build_encoder(enc_cfg, seed)
        step, metrics = 0, []
        opt = _make_optimizer(model, train_cfg)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_config_echo(out, enc_cfg, train_cfg)
        if resume_from is None:
            (out / "metrics.jsonl").write_text("")
            (out / "timing.jsonl").write_text("")

    end = train_cfg.total_steps if stop_at is None else min(stop_at, train_cfg.total_steps)
    model.train()
    while step < end:
        t0 = time.perf_counter()
        windows = stream.at(step)
        batch = collate(
            [features[i][a:b] for i, a, b in windows],
            [targets[i][a:b] for i, a, b in windows],
            _grids_for(windows, step, train_cfg),
        )
        lr = lr_at(step, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        _, logits = model(batch.x, batch.grid, batch.valid)
        res = masked_ce_loss(logits, batch.targets, batch.grid, batch.valid)
        loss = res["loss"]
        if not torch.isfinite(loss):
            snap = _snapshot(out, model, step)
            raise TrainingDiverged(f"non-finite loss at step {step}", snap)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            snap = _snapshot(out, model, step)
            raise TrainingDiverged(f"non-finite parameter after step {step}", snap)
        counts = res["masked_count"]
        rec = {
            "step": step,
            "lr": lr,
            "loss_total": float(loss.detach()),
            "loss_per_channel": [float(v) for v in res["per_channel"].detach()],
            "acc_per_channel": [c / n if n else 0.0 for c, n in zip(res["correct"], counts)],
        }
        metrics.append(rec)
        step += 1
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            with open(out / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"step": rec["step"], "wallclock_ms": (time.perf_counter() - t0) * 1e3}) + "\n")
            if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_train_state(out / f"state_step{step:07d}.pt", model, opt, step, metrics)
                _atomic_write(out / f"ckpt_step{step:07d}.shb", encode_checkpoint(model))
    model.eval()
    if out is not None:
        _atomic_write(out / "final.shb", encode_checkpoint(model))
        save_train_state(out / "final_state.pt", model, opt, step, metrics)
    return PretrainResult(model, metrics, step, opt.state_dict())


def save_train_state(path, model, opt, step, metrics):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {"checkpoint": encode_checkpoint(model), "optimizer": opt.state_dict(), "step": step, "metrics": metrics}, tmp
    )
    tmp.replace(path)


def _write_config_echo(out: Path, enc_cfg, train_cfg):
    echo = {"encoder": enc_cfg.to_dict(), "train": train_cfg.to_dict()}
    _atomic_write(out / "config.json", json.dumps(echo, indent=2, sort_keys=True).encode())


def _snapshot(out, model, step):
    if out is None:
        return None
    path = out / f"diverged_step{step:07d}.shb"
    _atomic_write(path, encode_checkpoint(model, {"step": step}))
    log.error("training diverged at step %d; snapshot at %s", step, path)
    return str(path)


@torch.no_grad()
def masked_accuracy(
    model: Encoder,
    dataset: Sequence[FeatureSequence],
    cluster_models: Sequence[ClusterModel],
    strategy: str = "random",
    ratio: float = 0.4,
    span: int = 3,
    seed: int = 0,
) -> list[float]:
    """Per-channel accuracy of predicting masked cluster ids over a dataset."""
    model.eval()
    correct = np.zeros(4)
    total = np.zeros(4)
    for i, seq in enumerate(dataset):
        x = sequence_tensor(seq, model.cfg, next(model.parameters()).dtype)[None]
        grid = make_mask_plan(x.shape[1], strategy, ratio, span, derive_seed(seed, 0xACC, i)).grid
        _, logits = model(x, torch.from_numpy(grid)[None])
        tg = assign_all(cluster_models, seq)
        pred = logits[0].argmax(-1).numpy()  # (T, 4)
        sel = grid.T
        correct += ((pred == tg) & sel).sum(axis=0)
        total += sel.sum(axis=0)
    return [float(c / t) if t else float("nan") for c, t in zip(correct, total)]
