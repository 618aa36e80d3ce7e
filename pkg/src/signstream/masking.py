"""Mask plans over the (channel, frame) grid and mask-token substitution."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

NUM_CHANNELS = 4


class Strategy(str, enum.Enum):
    CHANNEL = "channel"
    TIME = "time"
    RANDOM = "random"


@dataclass(eq=False)
class MaskPlan:
    grid: np.ndarray  # (4, T) bool, True = masked
    strategy: Strategy
    ratio: float
    span: int
    seed: int

    @property
    def num_frames(self) -> int:
        return int(self.grid.shape[1])

    def to_bitmap(self) -> bytes:
        """4*T bits, row-major, most significant bit first, zero-padded to bytes."""
        return np.packbits(self.grid.astype(np.uint8).ravel()).tobytes()

    @staticmethod
    def grid_from_bitmap(data: bytes, T: int) -> np.ndarray:
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=NUM_CHANNELS * T)
        return bits.reshape(NUM_CHANNELS, T).astype(bool)


def _span_row(T: int, ratio: float, span: int, rng: np.random.Generator) -> np.ndarray:
    row = np.zeros(T, dtype=bool)
    target = math.ceil(ratio * T - 1e-12)
    if target <= 0:
        return row
    starts = rng.permutation(T)
    count = 0
    leftovers = []
    # first pass: spans that do not touch any masked cell
    for s in starts:
        if count >= target:
            return row
        seg = row[s : s + span]
        if seg.any():
            leftovers.append(s)
            continue
        seg[:] = True
        count += seg.size
    # fragmented remainder: spans may now overlap earlier ones; runs only grow
    for s in leftovers:
        if count >= target:
            break
        seg = row[s : s + span]
        count += int((~seg).sum())
        seg[:] = True
    return row


def make_mask_plan(T: int, strategy, ratio: float = 0.4, span: int = 3, seed: int = 0) -> MaskPlan:
    """Seeded mask grid under the channel, time or random strategy.

    Time and random masking place non-overlapping spans of ``span`` frames at
    start positions drawn without replacement until at least ``ceil(ratio*T)``
    frames are covered; time masking draws one row and copies it to every
    channel, random masking draws each channel independently.  Channel masking
    hides ``ceil(4*ratio)`` whole channels, capped at 3 while ``ratio < 1`` so
    that some channel always stays visible.
    """
    strategy = Strategy(strategy)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    if span < 1:
        raise ValueError("span must be >= 1")
    rng = np.random.default_rng(seed & (2**64 - 1))
    grid = np.zeros((NUM_CHANNELS, T), dtype=bool)
    if strategy is Strategy.CHANNEL:
        n = math.ceil(ratio * NUM_CHANNELS - 1e-12)
        if ratio > 0.0:
            n = max(n, 1)
        if ratio < 1.0:
            n = min(n, NUM_CHANNELS - 1)
        if n > 0:
            grid[rng.choice(NUM_CHANNELS, size=n, replace=False)] = True
    elif strategy is Strategy.TIME:
        grid[:] = _span_row(T, ratio, span, rng)[None, :]
    else:
        for c in range(NUM_CHANNELS):
            grid[c] = _span_row(T, ratio, span, rng)
    return MaskPlan(grid, strategy, float(ratio), int(span), int(seed))


def apply_mask(projected, plan, mask_embeddings):
    """Replace masked (frame, channel) cells by the channel's mask embedding.

    ``projected`` is (T, 4, d) or batched (B, T, 4, d); ``plan`` is a MaskPlan,
    a (4, T) grid or a batched (B, 4, T) grid.  Works on numpy arrays and torch
    tensors; unmasked cells are passed through untouched.
    """
    grid = plan.grid if isinstance(plan, MaskPlan) else plan
    if projected.shape[-2] != NUM_CHANNELS or tuple(mask_embeddings.shape) != (NUM_CHANNELS, projected.shape[-1]):
        raise SchemaError("projected features and mask embeddings disagree on channel layout")
    if tuple(grid.shape[-2:]) != (NUM_CHANNELS, projected.shape[-3]) or grid.ndim != projected.ndim - 1:
        raise SchemaError(f"mask grid {tuple(grid.shape)} does not match features {tuple(projected.shape)}")
    if isinstance(projected, np.ndarray):
        sel = np.swapaxes(np.asarray(grid, dtype=bool), -1, -2)[..., None]
        return np.where(sel, np.asarray(mask_embeddings, dtype=projected.dtype), projected)
    import torch

    sel = torch.as_tensor(grid, dtype=torch.bool, device=projected.device).transpose(-1, -2).unsqueeze(-1)
    return torch.where(sel, mask_embeddings.to(projected.dtype), projected)
