"""Shared builders and the finite-difference gradient oracle."""

import numpy as np
import torch

from signstream.encoder import EncoderConfig, backward, build_encoder, forward, masked_ce_loss
from signstream.featio import FeatureSequence
from signstream.masking import make_mask_plan

# about 5.6k parameters: two blocks so attention across blocks is exercised
GRAD_CFG = EncoderConfig(
    n_blocks=2, model_dim=16, ffn_dim=32, n_heads=2, channel_proj_dim=8, k_per_channel=4, channel_dims=(6, 6, 6, 4)
)


def random_seq(T, dims, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return FeatureSequence.from_present([(scale * rng.normal(size=(T, d))).astype(np.float32) for d in dims])


def central_difference_check(cfg, seed, T=6, h=1e-4, floor=1e-6):
    """Max elementwise relative error between analytic and central-difference gradients.

    Both run in float64.  The relative error of one entry is
    |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    entries whose true gradient is essentially zero from dividing by noise.
    Returns ``(max relative error, parameter count)``.
    """
    model = build_encoder(cfg, seed=seed, dtype=torch.float64)
    seq = random_seq(T, cfg.channel_dims, seed=seed + 1000)
    plan = make_mask_plan(T, "random", 0.5, 2, seed)
    targets = np.random.default_rng(seed).integers(0, cfg.k_per_channel, size=(T, 4))
    analytic = backward(model, seq, plan, targets)

    def loss():
        with torch.no_grad():
            return float(masked_ce_loss(forward(model, seq, plan)["logits"], targets, plan)["loss"])

    worst, count = 0.0, 0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = float(grad[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        count += flat.numel()
    return worst, count


def reference_lloyd(x, centres, iters=200):
    """Plain textbook Lloyd used as an oracle; empty clusters keep their centre."""
    c = np.array(centres, dtype=float)
    for _ in range(iters):
        d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        new = np.array([x[lab == j].mean(0) if (lab == j).any() else c[j] for j in range(len(c))])
        if np.allclose(new, c, atol=0, rtol=0):
            break
        c = new
    d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
    return d.min(1).sum()


def sweep_instances():
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        k = 2 + seed % 3
        n = 40 if k < 4 else 24
        centres = rng.normal(0, 2.0, (k, 2))
        x = centres[rng.integers(k, size=n)] + rng.normal(0, 1.0, (n, 2))
        yield seed, k, x


def runs(row):
    """(start, length) of every maximal run of True."""
    out, start = [], None
    for t, v in enumerate(list(row) + [False]):
        if v and start is None:
            start = t
        elif not v and start is not None:
            out.append((start, t - start))
            start = None
    return out


def span_structure_ok(grid, span):
    T = grid.shape[1]
    for row in grid:
        for s, n in runs(row):
            if s + n < T and n < min(span, T):
                return False
    return True
