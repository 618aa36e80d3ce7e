"""Seeded synthetic multi-stream data standing in for real video features.

Each channel owns a palette of ``palette_size`` Gaussian bumps.  A latent
gesture is a per-channel ordering of that palette: while gesture ``g`` is active
the sequence walks through phases ``p = 0, 1, ...`` and channel ``c`` emits
bump ``order[g, c, p]`` plus isotropic noise.  All four channels share the
gesture id and phase, so a masked cell is recoverable from the visible
channels at the same frame or from its temporal neighbours.

With ``shared_phases`` set, all gestures agree on that many phases and
differ only on the rest, which makes gestures harder to tell apart.

Because every gesture visits every bump of a channel exactly once per cycle,
single-channel marginals carry no gesture information; the identity of a
gesture lives in which bumps co-occur across channels.  Clips that cover whole
cycles therefore have class-independent mean features, which keeps a
mean-pooled probe on raw features near chance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .featio import DEFAULT_DIMS, FeatureSequence, read_msf, write_msf


@dataclass
class SyntheticSpec:
    num_seqs: int = 50
    T_range: tuple[int, int] = (100, 100)
    seed: int = 0
    num_latent_gestures: int = 4
    dims: tuple[int, ...] = DEFAULT_DIMS
    palette_size: int = 16
    # phases at which every gesture emits the same bump; gestures then differ
    # only on the remaining palette_size - shared_phases phases
    shared_phases: int = 0
    # gesture spans inside a sequence; ignored when single_gesture is set
    span_range: tuple[int, int] = (12, 40)
    single_gesture: bool = False
    noise: float = 0.1
    # per-sequence style: a small offset added to every frame, far below the
    # bump spacing so cluster targets ignore it; clip labels combine gesture
    # and style as gesture * num_styles + style
    num_styles: int = 1
    style_scale: float = 0.0
    bump_scale: float = 1.0
    # fraction of hand cells whose detection is dropped (presence=False)
    missing_rate: float = 0.0
    # palette and gesture orderings come from world_seed so that separately
    # seeded samples (pretraining corpus, probe clips) share one world
    world_seed: int = 0
    frame_rate_hint: float = 14.89

    def __post_init__(self):
        self.T_range = tuple(int(v) for v in self.T_range)
        self.span_range = tuple(int(v) for v in self.span_range)
        self.dims = tuple(int(d) for d in self.dims)
        lo, hi = self.T_range
        if self.num_seqs < 0:
            raise ValueError("num_seqs must be >= 0")
        if lo < 1 or hi < lo:
            raise ValueError(f"empty T_range {self.T_range}")
        if self.span_range[0] < 1 or self.span_range[1] < self.span_range[0]:
            raise ValueError(f"empty span_range {self.span_range}")
        if self.num_styles < 1:
            raise ValueError("num_styles must be positive")
        if self.num_latent_gestures < 1 or self.palette_size < 1:
            raise ValueError("num_latent_gestures and palette_size must be positive")
        if not 0 <= self.shared_phases <= self.palette_size:
            raise ValueError("shared_phases must lie in [0, palette_size]")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    sequences: list[FeatureSequence] = field(default_factory=list)
    gestures: list[np.ndarray] = field(default_factory=list)  # per-frame gesture id
    phases: list[np.ndarray] = field(default_factory=list)
    styles: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.sequences)


def _world(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.world_seed & (2**64 - 1), 0x5EED])
    palettes = [
        rng.normal(0.0, spec.bump_scale, size=(spec.palette_size, d)).astype(np.float64) for d in spec.dims
    ]
    P = spec.palette_size
    order = np.empty((spec.num_latent_gestures, 4, P), dtype=np.int64)
    if spec.shared_phases == 0:
        for g in range(spec.num_latent_gestures):
            for c in range(4):
                order[g, c] = rng.permutation(P)
        return palettes, order
    base = np.stack([rng.permutation(P) for _ in range(4)])
    free = np.sort(rng.permutation(P)[spec.shared_phases :])
    for g in range(spec.num_latent_gestures):
        order[g] = base
        for c in range(4):
            order[g, c, free] = base[c, free][rng.permutation(free.size)]
    return palettes, order


def _styles(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.world_seed & (2**64 - 1), 0x57E1])
    out = []
    for d in spec.dims:
        v = rng.normal(size=(spec.num_styles, d))
        v *= spec.style_scale / np.linalg.norm(v, axis=1, keepdims=True)
        out.append(v)
    return out


def gen_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic dataset; a pure function of ``spec``."""
    palettes, order = _world(spec)
    style_offsets = _styles(spec)
    rng = np.random.default_rng(spec.seed & (2**64 - 1))
    out = SyntheticDataset(spec=spec)
    labels, styles = [], []
    P = spec.palette_size
    for _ in range(spec.num_seqs):
        T = int(rng.integers(spec.T_range[0], spec.T_range[1] + 1))
        gest = np.empty(T, dtype=np.int64)
        phase = np.empty(T, dtype=np.int64)
        if spec.single_gesture:
            gest[:] = rng.integers(spec.num_latent_gestures)
            phase[:] = (rng.integers(P) + np.arange(T)) % P
        else:
            t = 0
            while t < T:
                n = min(int(rng.integers(spec.span_range[0], spec.span_range[1] + 1)), T - t)
                gest[t : t + n] = rng.integers(spec.num_latent_gestures)
                phase[t : t + n] = (rng.integers(P) + np.arange(n)) % P
                t += n
        style = int(rng.integers(spec.num_styles)) if spec.num_styles > 1 else 0
        channels = []
        for c in range(4):
            mean = palettes[c][order[gest, c, phase]] + style_offsets[c][style]
            noise = rng.normal(0.0, spec.noise, size=mean.shape)
            channels.append((mean + noise).astype(np.float32))
        presence = np.ones((T, 4), dtype=bool)
        if spec.missing_rate > 0:
            for c in (1, 2):
                drop = rng.random(T) < spec.missing_rate
                presence[drop, c] = False
                channels[c][drop] = 0.0
        out.sequences.append(FeatureSequence(channels, presence, spec.frame_rate_hint))
        out.gestures.append(gest)
        out.phases.append(phase)
        major = int(np.bincount(gest, minlength=spec.num_latent_gestures).argmax())
        labels.append(major * spec.num_styles + style)
        styles.append(style)
    out.labels = np.asarray(labels, dtype=np.int64)
    out.styles = np.asarray(styles, dtype=np.int64)
    return out


# ------------------------------------------------------------------ on disk


def save_dataset(ds: SyntheticDataset, out_dir, task: str = "gesture") -> list[Path]:
    """Write ``seq_XXXXX.msf`` files, a label file and a ground-truth sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out_dir / "labels.jsonl", "w") as fh:
        for i, seq in enumerate(ds.sequences):
            p = out_dir / f"seq_{i:05d}.msf"
            write_msf(seq, p)
            paths.append(p)
            fh.write(json.dumps({"sequence": p.name, "task": task, "class_id": int(ds.labels[i])}) + "\n")
    np.savez(
        out_dir / "ground_truth.npz",
        **{f"gesture_{i:05d}": g for i, g in enumerate(ds.gestures)},
        **{f"phase_{i:05d}": p for i, p in enumerate(ds.phases)},
    )
    spec = asdict(ds.spec)
    with open(out_dir / "synthetic_spec.json", "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
    return paths


def list_sequences(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*.msf"))


def load_sequences(data_dir) -> list[FeatureSequence]:
    return [read_msf(p) for p in list_sequences(data_dir)]


def load_labels(path) -> list[dict]:
    """Newline-delimited ``{"sequence", "task", "class_id"}`` records."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                records.append({"sequence": rec["sequence"], "task": rec["task"], "class_id": int(rec["class_id"])})
    return records


__all__ = [
    "SyntheticDataset",
    "SyntheticSpec",
    "gen_synthetic",
    "list_sequences",
    "load_labels",
    "load_sequences",
    "save_dataset",
]
