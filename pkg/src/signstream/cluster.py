"""Per-channel k-means producing the discrete masked-prediction targets."""

from __future__ import annotations

import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, InsufficientDataError, LengthError, SchemaError
from .featio import FeatureSequence, _atomic_write

log = logging.getLogger(__name__)

KMC_MAGIC = b"KMC1"
KMC_VERSION = 1
_KMC_HEAD = struct.Struct("<4sIIII")

_CHUNK_ELEMS = 4_000_000
# every k-subset of the data is also tried as a seeding when
# (number of subsets) * n * k stays below this
EXHAUSTIVE_WORK = 1_500_000


@dataclass(eq=False)
class ClusterModel:
    channel_id: int
    centroids: np.ndarray  # (k, dim) float64
    trained_on_fraction: float = 1.0
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, (n, k), by explicit differences.

    Direct differencing (rather than the |x|^2 - 2xc + |c|^2 expansion) keeps
    exact ties exact so the lowest-index tie-break is honoured.
    """
    out = np.empty((x.shape[0], centroids.shape[0]), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, centroids.shape[0] * x.shape[1]))
    for lo in range(0, x.shape[0], step):
        diff = x[lo : lo + step, None, :] - centroids[None, :, :]
        out[lo : lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(np.asarray(x, dtype=np.float64), np.asarray(centroids, dtype=np.float64))
    labels = d.argmin(axis=1)  # first minimum = lowest index on ties
    return labels, d[np.arange(len(labels)), labels]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centres = np.empty((k, x.shape[1]), dtype=np.float64)
    centres[0] = x[rng.integers(n)]
    closest = ((x - centres[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a centre; pick uniformly
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centres[j] = x[idx]
        closest = np.minimum(closest, ((x - centres[j]) ** 2).sum(axis=1))
    return centres


def lloyd(x: np.ndarray, centres: np.ndarray, max_iters: int = 100, tol: float = 1e-6):
    """Lloyd iterations from given centres.

    Returns ``(centres, labels, inertia_history, n_iter)``.  The history holds
    the inertia under each successive centre set and is checked to be
    non-increasing.
    """
    centres = np.array(centres, dtype=np.float64)
    k = centres.shape[0]
    labels, d = nearest(x, centres)
    history = [float(d.sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = np.zeros_like(centres)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        new[~filled] = centres[~filled]
        # empty-cluster repair: move each empty centre onto the point that is
        # currently worst served, one at a time
        if not filled.all():
            worst = d.copy()
            for j in np.flatnonzero(~filled):
                i = int(worst.argmax())
                new[j] = x[i]
                worst[i] = -1.0
        shift = float(np.sqrt(((new - centres) ** 2).sum(axis=1)).max())
        centres = new
        labels, d = nearest(x, centres)
        inertia = float(d.sum())
        prev = history[-1]
        if inertia > prev + 1e-9 * max(1.0, abs(prev)):
            raise AssertionError(f"k-means inertia increased: {prev} -> {inertia}")
        history.append(inertia)
        if shift < tol:
            break
    return centres, labels, history, n_iter


def fit_kmeans(
    data,
    k: int = 256,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 3,
    channel_id: int = 0,
    trained_on_fraction: float = 1.0,
    exhaustive_work: int = EXHAUSTIVE_WORK,
) -> ClusterModel:
    """k-means++ seeded Lloyd's algorithm; best of ``n_init`` seeded restarts.

    Small problems, where the number of k-point subsets of the data times
    ``n * k`` is at most ``exhaustive_work``, additionally run Lloyd from every
    such subset so the result is never worse than any data-point seeding.
    """
    x = _as_matrix(data)
    if k < 1:
        raise ValueError("k must be positive")
    if x.shape[0] < k:
        raise InsufficientDataError(f"{x.shape[0]} points cannot support k={k}")
    rng = np.random.default_rng(seed & (2**64 - 1))
    best = None
    for _ in range(max(1, n_init)):
        centres, _, history, n_iter = lloyd(x, _kmeanspp(x, k, rng), max_iters, tol)
        if best is None or history[-1] < best[1][-1]:
            best = (centres, history, n_iter)
    if 1 < k < x.shape[0] and math.comb(x.shape[0], k) * x.shape[0] * k <= exhaustive_work:
        subsets = np.array(list(itertools.combinations(range(x.shape[0]), k)))
        winner = subsets[_batched_lloyd_inertia(x, subsets, max_iters, tol).argmin()]
        centres, _, history, n_iter = lloyd(x, x[winner], max_iters, tol)
        if history[-1] < best[1][-1]:
            best = (centres, history, n_iter)
    centres, history, n_iter = best
    return ClusterModel(channel_id, centres, trained_on_fraction, history, n_iter)


def _batched_lloyd_inertia(x: np.ndarray, subsets: np.ndarray, max_iters: int, tol: float) -> np.ndarray:
    """Final inertia of Lloyd runs started from each row of ``subsets`` at once.

    Empty clusters keep their previous centre; the winning seeding is re-run
    through :func:`lloyd` so the reported model carries the usual checks.
    """
    c = x[subsets]  # (S, k, d)
    onehot = np.eye(subsets.shape[1])
    for _ in range(max_iters):
        d = ((x[None, :, None, :] - c[:, None, :, :]) ** 2).sum(-1)  # (S, n, k)
        member = onehot[d.argmin(-1)]
        counts = member.sum(1)
        sums = np.einsum("snk,nd->skd", member, x)
        new = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], c)
        shift = np.sqrt(((new - c) ** 2).sum(-1)).max()
        c = new
        if shift < tol:
            break
    d = ((x[None, :, None, :] - c[:, None, :, :]) ** 2).sum(-1)
    return d.min(-1).sum(-1)


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if data.ndim != 2:
            raise SchemaError(f"expected an (n, dim) matrix, got shape {data.shape}")
        return data.astype(np.float64, copy=False)
    rows = list(data)
    if not rows:
        return np.zeros((0, 0))
    dims = {np.shape(r)[-1] for r in rows}
    if len(dims) != 1:
        raise SchemaError(f"vectors have mixed dims {sorted(dims)}")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)


def assign(model: ClusterModel, seq: FeatureSequence | np.ndarray) -> np.ndarray:
    """Nearest-centroid label per frame for the model's channel."""
    x = seq.channels[model.channel_id] if isinstance(seq, FeatureSequence) else np.asarray(seq)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise SchemaError(f"feature dim {x.shape[-1]} does not match cluster model dim {model.dim}")
    return nearest(x, model.centroids)[0]


def assign_all(models: Sequence[ClusterModel], seq: FeatureSequence) -> np.ndarray:
    """(T, 4) targets ordered face, left hand, right hand, body pose."""
    return np.stack([assign(m, seq) for m in models], axis=1)


def subsample_frames(sequences: Sequence[FeatureSequence], channel: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded uniform sample of frames (not sequences) from one channel."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    x = np.concatenate([s.channels[channel] for s in sequences], axis=0)
    if fraction >= 1.0:
        return x.astype(np.float64)
    n = max(1, int(round(fraction * x.shape[0])))
    idx = np.sort(np.random.default_rng(seed & (2**64 - 1)).choice(x.shape[0], size=n, replace=False))
    return x[idx].astype(np.float64)


def fit_channel_models(
    sequences: Sequence[FeatureSequence], k: int, fraction: float = 0.1, seed: int = 0, **kw
) -> list[ClusterModel]:
    models = []
    for c in range(4):
        sub_seed = (seed * 1_000_003 + c) & (2**64 - 1)
        x = subsample_frames(sequences, c, fraction, sub_seed)
        models.append(fit_kmeans(x, k, sub_seed, channel_id=c, trained_on_fraction=fraction, **kw))
    return models


def dump_cluster_samples(
    model: ClusterModel,
    dataset: Sequence[FeatureSequence],
    cluster_ids: Sequence[int],
    n_per_cluster: int,
    seed: int,
) -> dict[int, list[tuple[int, int]]]:
    """Uniformly sample up to ``n_per_cluster`` (sequence id, frame) cells per cluster."""
    for cid in cluster_ids:
        if not 0 <= cid < model.k:
            raise ValueError(f"cluster id {cid} outside [0, {model.k})")
    members: dict[int, list[tuple[int, int]]] = {int(c): [] for c in cluster_ids}
    for sid, seq in enumerate(dataset):
        labels = assign(model, seq)
        for cid in members:
            members[cid].extend((sid, int(t)) for t in np.flatnonzero(labels == cid))
    rng = np.random.default_rng(seed & (2**64 - 1))
    manifest = {}
    for cid in cluster_ids:
        cells = members[int(cid)]
        if not cells:
            log.warning("cluster %d of channel %d has no members", cid, model.channel_id)
            manifest[int(cid)] = []
            continue
        take = min(n_per_cluster, len(cells))
        pick = np.sort(rng.choice(len(cells), size=take, replace=False))
        manifest[int(cid)] = [cells[i] for i in pick]
    return manifest


# --------------------------------------------------------------------- files


def encode_kmc(model: ClusterModel) -> bytes:
    head = _KMC_HEAD.pack(KMC_MAGIC, KMC_VERSION, model.channel_id, model.k, model.dim)
    return head + np.ascontiguousarray(model.centroids, dtype="<f4").tobytes()


def decode_kmc(data: bytes) -> ClusterModel:
    if len(data) < _KMC_HEAD.size:
        raise LengthError("file shorter than the KMC header")
    magic, version, channel, k, dim = _KMC_HEAD.unpack_from(data)
    if magic != KMC_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != KMC_VERSION:
        raise FormatError(f"unsupported KMC version {version}")
    need = _KMC_HEAD.size + k * dim * 4
    if len(data) != need:
        raise LengthError(f"expected {need} bytes, got {len(data)}")
    cents = np.frombuffer(data, dtype="<f4", offset=_KMC_HEAD.size).reshape(k, dim).astype(np.float64)
    if not np.isfinite(cents).all():
        raise FormatError("centroids contain NaN or Inf")
    return ClusterModel(int(channel), cents)


def save_cluster_model(model: ClusterModel, path) -> None:
    _atomic_write(path, encode_kmc(model))


def load_cluster_model(path) -> ClusterModel:
    with open(path, "rb") as fh:
        return decode_kmc(fh.read())
