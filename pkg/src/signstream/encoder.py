"""Multi-stream transformer encoder with per-channel cluster prediction heads.

Frame layout inside the network::

    raw channel c --LayerNorm--> Linear(dim_c -> proj) --+
                                                         |  (masked cells swapped
    ...four channels...                                  |   for a learned
                                                         v   per-channel embedding)
    concat(4 * proj) --fusion Linear--> + sinusoidal position --> layer 0
    pre-norm blocks (attention, GELU FFN) --> layers 1..n-1
    final LayerNorm --> layer n --> four Linear(model_dim -> k) heads

Every parameter lives under a dotted name (``channel_proj.2.weight``,
``blocks.5.attn.q.weight``, ...).  Gradients come from torch autograd.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, LengthError, NoTargetError, PreconditionError, SchemaError
from .featio import DEFAULT_DIMS, FeatureSequence, _atomic_write
from .masking import NUM_CHANNELS, MaskPlan, apply_mask

SHB_MAGIC = b"SHB1"
SHB_VERSION = 1


@dataclass
class EncoderConfig:
    n_blocks: int = 12
    model_dim: int = 768
    ffn_dim: int = 3072
    n_heads: int = 12
    channel_proj_dim: int = 256
    k_per_channel: int = 256
    channel_dims: tuple = DEFAULT_DIMS
    positional: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.channel_dims = tuple(int(d) for d in self.channel_dims)
        self.validate()

    def validate(self):
        if len(self.channel_dims) != NUM_CHANNELS or min(self.channel_dims) < 1:
            raise SchemaError(f"need four positive channel dims, got {self.channel_dims}")
        for name in ("model_dim", "ffn_dim", "n_heads", "channel_proj_dim", "k_per_channel"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be positive")
        if self.n_blocks < 0:
            raise SchemaError("n_blocks must be >= 0")
        if self.model_dim % self.n_heads:
            raise SchemaError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @property
    def fusion_in(self) -> int:
        return NUM_CHANNELS * self.channel_proj_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_dims"] = list(self.channel_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form number of trainable parameters.

    ========================  =========================================
    channel LayerNorms        2 * sum(dim_c)
    channel projections       sum(dim_c * P + P)
    mask embeddings           4 * P
    fusion                    4P * D + D
    each block                2 LayerNorms (4D) + q,k,v,o (4 * (D^2 + D))
                              + FFN (D*F + F) + (F*D + D)
    final LayerNorm           2D
    prediction heads          4 * (D * k + k)
    ========================  =========================================
    """
    D, Fd, P, k = cfg.model_dim, cfg.ffn_dim, cfg.channel_proj_dim, cfg.k_per_channel
    dims = cfg.channel_dims
    norms = 2 * sum(dims)
    proj = sum(d * P + P for d in dims)
    mask = NUM_CHANNELS * P
    fusion = NUM_CHANNELS * P * D + D
    block = 4 * D + 4 * (D * D + D) + (D * Fd + Fd) + (Fd * D + D)
    final = 2 * D
    heads = NUM_CHANNELS * (D * k + k)
    return norms + proj + mask + fusion + cfg.n_blocks * block + final + heads


def lora_param_count(cfg: EncoderConfig) -> int:
    """sum(out + in) over every linear map a rank-1 adapter is attached to.

    Adapters cover the channel projections, the fusion map and the q/k/v/o and
    FFN maps of every block; the pretraining heads are not part of the
    downstream encoder and receive none.
    """
    D, Fd, P = cfg.model_dim, cfg.ffn_dim, cfg.channel_proj_dim
    proj = sum(d + P for d in cfg.channel_dims)
    fusion = NUM_CHANNELS * P + D
    block = 4 * (D + D) + 2 * (D + Fd)
    return proj + fusion + cfg.n_blocks * block


def lora_param_fraction(cfg: EncoderConfig) -> float:
    return lora_param_count(cfg) / param_count(cfg)


# ------------------------------------------------------------------ modules


class AdaptableLinear(nn.Linear):
    """nn.Linear with an optional rank-1 update ``W + b a^T``."""

    def __init__(self, in_features, out_features):
        super().__init__(in_features, out_features)
        self.lora_a = None
        self.lora_b = None

    def attach_lora(self, generator: torch.Generator | None = None, std: float = 0.02):
        w = self.weight
        a = torch.randn(self.in_features, generator=generator, dtype=w.dtype) * std
        self.lora_a = nn.Parameter(a.to(w.device))
        self.lora_b = nn.Parameter(torch.zeros(self.out_features, dtype=w.dtype, device=w.device))

    def detach_lora(self):
        self.lora_a = None
        self.lora_b = None

    def effective_weight(self) -> torch.Tensor:
        if self.lora_a is None:
            return self.weight
        return self.weight + torch.outer(self.lora_b, self.lora_a)

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        if self.lora_a is not None:
            y = y + (x @ self.lora_a).unsqueeze(-1) * self.lora_b
        return y


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = AdaptableLinear(dim, dim)
        self.k = AdaptableLinear(dim, dim)
        self.v = AdaptableLinear(dim, dim)
        self.o = AdaptableLinear(dim, dim)

    def forward(self, x, valid):
        B, T, D = x.shape
        h = self.n_heads
        dh = D // h

        def split(t):
            return t.view(B, T, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_dim, eps=cfg.ln_eps)
        self.attn = Attention(cfg.model_dim, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.model_dim, eps=cfg.ln_eps)
        self.fc1 = AdaptableLinear(cfg.model_dim, cfg.ffn_dim)
        self.fc2 = AdaptableLinear(cfg.ffn_dim, cfg.model_dim)

    def forward(self, x, valid):
        x = x + self.attn(self.ln1(x), valid)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def sinusoidal_positions(T: int, dim: int) -> torch.Tensor:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((T, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return torch.from_numpy(pe)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        P, D = cfg.channel_proj_dim, cfg.model_dim
        self.channel_norm = nn.ModuleList(nn.LayerNorm(d, eps=cfg.ln_eps) for d in cfg.channel_dims)
        self.channel_proj = nn.ModuleList(AdaptableLinear(d, P) for d in cfg.channel_dims)
        self.mask_embedding = nn.Parameter(torch.zeros(NUM_CHANNELS, P))
        self.fusion = AdaptableLinear(cfg.fusion_in, D)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(D, eps=cfg.ln_eps)
        self.heads = nn.ModuleList(nn.Linear(D, cfg.k_per_channel) for _ in range(NUM_CHANNELS))
        self._splits = list(cfg.channel_dims)

    # -- init ---------------------------------------------------------------

    def reset_parameters(self, seed: int = 0, zero_heads: bool = False):
        g = torch.Generator().manual_seed(seed & (2**63 - 1))
        for name, p in self.named_parameters():
            if name.endswith("lora_a") or name.endswith("lora_b"):
                continue
            with torch.no_grad():
                self._init_param(name, p, g, zero_heads)
        return self

    def _init_param(self, name, p, g, zero_heads):
        std = self.cfg.init_std
        is_norm = ".ln" in name or name.startswith(("channel_norm", "final_norm"))
        if is_norm:
            p.fill_(1.0 if name.endswith("weight") else 0.0)
        elif name.startswith("heads") and zero_heads:
            p.zero_()
        elif name.endswith("bias"):
            p.zero_()
        else:
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)

    def reinit_block(self, index: int, seed: int):
        """Fresh initialization of one transformer block (weights, biases, norms)."""
        g = torch.Generator().manual_seed(seed & (2**63 - 1))
        prefix = f"blocks.{index % len(self.blocks)}."
        for name, p in self.named_parameters():
            if name.startswith(prefix) and not name.endswith(("lora_a", "lora_b")):
                with torch.no_grad():
                    self._init_param(name, p, g, False)

    # -- lora ---------------------------------------------------------------

    def adaptable_linears(self) -> list[tuple[str, AdaptableLinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, AdaptableLinear)]

    def attach_lora(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed & (2**63 - 1))
        for _, m in self.adaptable_linears():
            m.attach_lora(g)
        return self

    def detach_lora(self):
        for _, m in self.adaptable_linears():
            m.detach_lora()

    @property
    def has_lora(self) -> bool:
        return any(m.lora_a is not None for _, m in self.adaptable_linears())

    # -- forward --------------------------------------------------------------

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """(..., T, sum dims) raw features -> (..., T, 4, proj) normalized projections."""
        parts = torch.split(x, self._splits, dim=-1)
        proj = [p(n(c)) for c, n, p in zip(parts, self.channel_norm, self.channel_proj)]
        return torch.stack(proj, dim=-2)

    def embed(self, x: torch.Tensor, grid: torch.Tensor | None = None) -> torch.Tensor:
        """Layer-0 representation: masked projections, fused, plus positions."""
        proj = self.project(x)
        if grid is not None:
            proj = apply_mask(proj, grid, self.mask_embedding)
        h = self.fusion(proj.flatten(-2))
        if self.cfg.positional:
            h = h + sinusoidal_positions(h.shape[-2], h.shape[-1]).to(h.dtype)
        return h

    def encode(self, x, grid=None, valid=None) -> list[torch.Tensor]:
        """All layer outputs, n_blocks + 1 tensors of shape (B, T, model_dim)."""
        h = self.embed(x, grid)
        layers = [h]
        for blk in self.blocks:
            h = blk(h, valid)
            layers.append(h)
        layers[-1] = self.final_norm(layers[-1])
        return layers

    def forward(self, x, grid=None, valid=None):
        """Returns ``(layers, logits)`` with logits shaped (B, T, 4, k)."""
        layers = self.encode(x, grid, valid)
        top = layers[-1]
        logits = torch.stack([head(top) for head in self.heads], dim=-2)
        return layers, logits


def build_encoder(cfg: EncoderConfig, seed: int = 0, zero_heads: bool = False, dtype=torch.float32) -> Encoder:
    model = Encoder(cfg).to(dtype)
    return model.reset_parameters(seed, zero_heads)


def registry_count(model: nn.Module, include_lora: bool = False) -> int:
    return sum(
        p.numel()
        for n, p in model.named_parameters()
        if include_lora or not n.endswith(("lora_a", "lora_b"))
    )


# ------------------------------------------------------------ sequence API


def sequence_tensor(seq: FeatureSequence, cfg: EncoderConfig, dtype=torch.float32) -> torch.Tensor:
    if not seq.presence.all():
        raise PreconditionError("sequence has absent cells; run interpolate_missing first")
    if tuple(seq.dims) != tuple(cfg.channel_dims):
        raise SchemaError(f"sequence dims {seq.dims} != encoder dims {cfg.channel_dims}")
    return torch.from_numpy(seq.concat()).to(dtype)


def _grid_tensor(plan, T: int) -> torch.Tensor | None:
    if plan is None:
        return None
    grid = plan.grid if isinstance(plan, MaskPlan) else np.asarray(plan)
    if grid.shape != (NUM_CHANNELS, T):
        raise SchemaError(f"mask plan shape {grid.shape} does not match ({NUM_CHANNELS}, {T})")
    return torch.from_numpy(np.ascontiguousarray(grid, dtype=bool))


def forward(model: Encoder, seq: FeatureSequence, plan=None) -> dict:
    """Single-sequence forward: ``layers`` (n+1, T, D) and ``logits`` (4, T, k)."""
    dtype = next(model.parameters()).dtype
    x = sequence_tensor(seq, model.cfg, dtype)[None]
    grid = _grid_tensor(plan, x.shape[1])
    layers, logits = model(x, None if grid is None else grid[None])
    return {"layers": torch.stack(layers)[:, 0], "logits": logits[0].permute(1, 0, 2)}


def masked_ce_loss(logits, targets, plan, valid=None) -> dict:
    """Mean cross-entropy over masked cells, averaged across channels.

    Accepts single-sequence shapes (logits (4, T, k), targets (T, 4), plan
    (4, T)) or batched ones (logits (B, T, 4, k), targets (B, T, 4), grid
    (B, 4, T), optional ``valid`` (B, T)).  Each channel's loss is the mean
    over its masked cells; the total is the mean of channel losses over the
    channels that have at least one masked cell.
    """
    grid = plan.grid if isinstance(plan, MaskPlan) else plan
    grid = torch.as_tensor(np.asarray(grid) if not torch.is_tensor(grid) else grid, dtype=torch.bool)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() == 3:  # single sequence
        logits = logits.permute(1, 0, 2)[None]
        targets = targets[None]
        grid = grid[None]
    B, T, C, k = logits.shape
    if targets.shape != (B, T, C) or grid.shape != (B, C, T):
        raise SchemaError(
            f"loss inputs disagree: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"grid {tuple(grid.shape)}"
        )
    cell = grid.transpose(1, 2)  # (B, T, C)
    if valid is not None:
        cell = cell & torch.as_tensor(valid, dtype=torch.bool)[:, :, None]
    per_channel, counts, correct = [], [], []
    for c in range(C):
        sel = cell[:, :, c]
        n = int(sel.sum())
        counts.append(n)
        if n == 0:
            per_channel.append(logits.new_zeros(()))
            correct.append(0)
            continue
        lg = logits[:, :, c][sel]
        tg = targets[:, :, c][sel]
        if int(tg.max()) >= k or int(tg.min()) < 0:
            raise SchemaError(f"target id outside [0, {k}) on channel {c}")
        per_channel.append(F.cross_entropy(lg, tg))
        correct.append(int((lg.detach().argmax(-1) == tg).sum()))
    active = [l for l, n in zip(per_channel, counts) if n > 0]
    if not active:
        raise NoTargetError("no masked cells: the masked prediction loss is undefined")
    total = torch.stack(active).mean()
    return {
        "loss": total,
        "per_channel": torch.stack(per_channel),
        "masked_count": counts,
        "correct": correct,
    }


def backward(model: Encoder, seq: FeatureSequence, plan, targets, loss_scale: float = 1.0) -> dict:
    """Gradients of the masked loss w.r.t. every trainable parameter, by name."""
    out = forward(model, seq, plan)
    loss = masked_ce_loss(out["logits"], targets, plan)["loss"] * loss_scale
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# -------------------------------------------------------------- checkpoint


def encode_checkpoint(model: Encoder, extra: dict | None = None) -> bytes:
    meta = {"config": model.cfg.to_dict(), "lora": model.has_lora}
    if extra:
        meta["extra"] = extra
    cfg_bytes = json.dumps(meta, sort_keys=True).encode()
    params = list(model.named_parameters())
    chunks = [SHB_MAGIC, struct.pack("<II", SHB_VERSION, len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode()
        data = p.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", data.size), data.tobytes()]
    return b"".join(chunks)


def decode_checkpoint(data: bytes, dtype=torch.float32) -> tuple[Encoder, dict]:
    if data[:4] != SHB_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    try:
        version, n_cfg = struct.unpack_from("<II", data, 4)
        if version != SHB_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(data[off : off + n_cfg].decode())
        off += n_cfg
        (n_params,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n_params):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode()
            off += nlen
            (count,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + 4 * count > len(data):
                raise LengthError(f"checkpoint truncated inside {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            off += 4 * count
    except struct.error as exc:
        raise LengthError(f"checkpoint truncated: {exc}") from None
    if off != len(data):
        raise LengthError(f"{len(data) - off} trailing bytes in checkpoint")
    model = Encoder(EncoderConfig.from_dict(meta["config"]))
    if meta.get("lora"):
        model.attach_lora()
    model = model.to(dtype)
    registry = dict(model.named_parameters())
    if set(registry) != set(tensors):
        missing = sorted(set(registry) - set(tensors))
        unknown = sorted(set(tensors) - set(registry))
        raise SchemaError(f"checkpoint parameters differ from registry: missing={missing} unknown={unknown}")
    with torch.no_grad():
        for name, p in registry.items():
            arr = tensors[name]
            if arr.size != p.numel():
                raise SchemaError(f"{name}: {arr.size} values, registry expects {p.numel()}")
            p.copy_(torch.from_numpy(arr.copy()).view(p.shape).to(dtype))
    return model, meta.get("extra", {})


def save_checkpoint(model: Encoder, path, extra: dict | None = None) -> None:
    _atomic_write(path, encode_checkpoint(model, extra))


def load_checkpoint(path, dtype=torch.float32) -> tuple[Encoder, dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), dtype)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    x: torch.Tensor  # (B, T, sum dims)
    valid: torch.Tensor  # (B, T) bool
    targets: torch.Tensor | None = None  # (B, T, 4) long
    grid: torch.Tensor | None = None  # (B, 4, T) bool
    lengths: list = field(default_factory=list)


def collate(
    features: Sequence[np.ndarray],
    targets: Sequence[np.ndarray] | None = None,
    grids: Sequence[np.ndarray] | None = None,
    dtype=torch.float32,
) -> Batch:
    """Right-pad (T_i, sum dims) matrices into one batch."""
    lengths = [int(f.shape[0]) for f in features]
    B, T = len(features), max(lengths)
    width = features[0].shape[1]
    x = np.zeros((B, T, width), dtype=np.float32)
    valid = np.zeros((B, T), dtype=bool)
    for i, f in enumerate(features):
        x[i, : lengths[i]] = f
        valid[i, : lengths[i]] = True
    batch = Batch(torch.from_numpy(x).to(dtype), torch.from_numpy(valid), lengths=lengths)
    if targets is not None:
        tg = np.zeros((B, T, NUM_CHANNELS), dtype=np.int64)
        for i, t in enumerate(targets):
            tg[i, : lengths[i]] = t
        batch.targets = torch.from_numpy(tg)
    if grids is not None:
        gr = np.zeros((B, NUM_CHANNELS, T), dtype=bool)
        for i, g in enumerate(grids):
            gr[i, :, : lengths[i]] = g
        batch.grid = torch.from_numpy(gr)
    return batch
