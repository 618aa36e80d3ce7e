"""Report tables (JSON + aligned text) and figures rendered next to them."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .featio import CHANNEL_NAMES, _atomic_write  # noqa: E402


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str], title: str | None = None) -> str:
    """Plain-text table with every column padded to its widest cell."""
    cells = [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) for r in rows) and rows for c in columns]

    def line(vals):
        parts = [v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)]
        return "  ".join(parts).rstrip()

    out = []
    if title:
        out.append(title)
    out.append(line(list(columns)))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def write_table(out_dir, stem: str, rows: Sequence[dict], columns: Sequence[str], title=None, extra=None) -> dict:
    """Write ``stem.json`` and ``stem.txt``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"title": title, "columns": list(columns), "rows": list(rows)}
    if extra:
        doc.update(extra)
    jpath, tpath = out_dir / f"{stem}.json", out_dir / f"{stem}.txt"
    _atomic_write(jpath, json.dumps(doc, indent=2, sort_keys=True).encode())
    _atomic_write(tpath, format_table(rows, columns, title).encode())
    return {"json": str(jpath), "text": str(tpath)}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or y.size < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_training_curves(metrics: Sequence[dict], path, window: int = 25) -> str:
    """Loss and masked accuracy per channel against step."""
    path = Path(path)
    steps = np.array([m["step"] for m in metrics])
    loss = np.array([m["loss_per_channel"] for m in metrics]).reshape(len(metrics), 4)
    acc = np.array([m["acc_per_channel"] for m in metrics]).reshape(len(metrics), 4)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 3.6))
    for c, name in enumerate(CHANNEL_NAMES):
        y = _smooth(loss[:, c], window)
        ax_l.plot(steps[len(steps) - len(y) :], y, label=name, lw=1.2)
        y = _smooth(acc[:, c], window)
        ax_a.plot(steps[len(steps) - len(y) :], y, label=name, lw=1.2)
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("masked cross-entropy")
    ax_a.set_xlabel("step")
    ax_a.set_ylabel("masked accuracy")
    ax_a.set_ylim(0, 1)
    ax_a.legend(frameon=False, fontsize=8)
    for ax in (ax_l, ax_a):
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_ablation(rows: Sequence[dict], path, metric: str = "recall@1") -> str:
    """Grouped bars: one group per masking strategy, one bar per adaptation mode."""
    path = Path(path)
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    lookup = {(r["strategy"], r["mode"]): r[metric] for r in rows}
    width = 0.8 / max(1, len(modes))
    x = np.arange(len(strategies))
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for j, mode in enumerate(modes):
        vals = [lookup.get((s, mode), np.nan) for s in strategies]
        ax.bar(x + (j - (len(modes) - 1) / 2) * width, vals, width, label=mode)
    ax.set_xticks(x, strategies)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
