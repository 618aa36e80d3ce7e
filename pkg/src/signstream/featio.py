"""Multi-stream frame features: data model, MSF file format and pre-processing.

Every frame carries four channel vectors (face, left hand, right hand, body
pose) plus a per-channel presence flag recording whether the upstream detector
succeeded.  Vectors at absent cells are zero until :func:`interpolate_missing`
fills them in.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegeneratePoseError, FormatError, LengthError, SchemaError


class Channel(enum.IntEnum):
    FACE = 0
    LEFT_HAND = 1
    RIGHT_HAND = 2
    BODY_POSE = 3


CHANNELS = tuple(Channel)
CHANNEL_NAMES = ("face", "left_hand", "right_hand", "body_pose")
DEFAULT_DIMS = (384, 384, 384, 14)

MSF_MAGIC = b"MSF1"
MSF_VERSION = 1
# magic | u32 version | u32 num_channels | num_channels x u32 dims | u64 T | f32 fps
_MSF_HEAD = struct.Struct("<4sII")


def msf_header_size(num_channels: int = 4) -> int:
    return _MSF_HEAD.size + 4 * num_channels + 8 + 4


@dataclass(eq=False)
class FeatureSequence:
    """T frames of four channel vectors with per-cell presence flags."""

    channels: list[np.ndarray]  # 4 arrays, each (T, dim_c) float32
    presence: np.ndarray  # (T, 4) bool
    frame_rate_hint: float = 25.0
    diagnostics: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.channels = [np.ascontiguousarray(c, dtype=np.float32) for c in self.channels]
        self.presence = np.ascontiguousarray(self.presence, dtype=bool)

    @classmethod
    def from_present(cls, channels: Sequence[np.ndarray], frame_rate_hint: float = 25.0):
        T = len(channels[0])
        return cls(list(channels), np.ones((T, len(channels)), dtype=bool), frame_rate_hint)

    @property
    def num_frames(self) -> int:
        return int(self.presence.shape[0])

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(c.shape[1]) for c in self.channels)

    def validate(self, dims: Sequence[int] | None = None) -> None:
        if len(self.channels) != 4:
            raise SchemaError(f"expected 4 channels, got {len(self.channels)}")
        T = self.presence.shape[0]
        if T < 1:
            raise SchemaError("a sequence needs at least one frame")
        if self.presence.shape != (T, 4):
            raise SchemaError(f"presence must be ({T}, 4), got {self.presence.shape}")
        for c, arr in enumerate(self.channels):
            if arr.ndim != 2 or arr.shape[0] != T:
                raise SchemaError(f"channel {CHANNEL_NAMES[c]} has shape {arr.shape}, expected ({T}, dim)")
            if dims is not None and arr.shape[1] != dims[c]:
                raise SchemaError(f"channel {CHANNEL_NAMES[c]} dim {arr.shape[1]} != declared {dims[c]}")

    def concat(self) -> np.ndarray:
        """(T, sum(dims)) frame-major matrix in channel order."""
        return np.concatenate(self.channels, axis=1)

    def select_frames(self, idx) -> "FeatureSequence":
        return FeatureSequence(
            [c[idx] for c in self.channels], self.presence[idx], self.frame_rate_hint, self.diagnostics
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        if self.dims != other.dims or self.num_frames != other.num_frames:
            return False
        if np.float32(self.frame_rate_hint).tobytes() != np.float32(other.frame_rate_hint).tobytes():
            return False
        return bool(np.array_equal(self.presence, other.presence)) and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.channels, other.channels)
        )


# --------------------------------------------------------------------------- MSF


def encode_msf(seq: FeatureSequence) -> bytes:
    seq.validate()
    T = seq.num_frames
    buf = io.BytesIO()
    buf.write(_MSF_HEAD.pack(MSF_MAGIC, MSF_VERSION, 4))
    buf.write(struct.pack("<4I", *seq.dims))
    buf.write(struct.pack("<Qf", T, seq.frame_rate_hint))
    buf.write(seq.presence.astype(np.uint8).tobytes())
    buf.write(seq.concat().astype("<f4").tobytes())
    return buf.getvalue()


def decode_msf(data: bytes) -> FeatureSequence:
    if len(data) < _MSF_HEAD.size:
        raise LengthError("file shorter than the MSF header")
    magic, version, nch = _MSF_HEAD.unpack_from(data, 0)
    if magic != MSF_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != MSF_VERSION:
        raise FormatError(f"unsupported MSF version {version}")
    if nch != 4:
        raise SchemaError(f"MSF declares {nch} channels, expected 4")
    head = msf_header_size(nch)
    if len(data) < head:
        raise LengthError("file shorter than the MSF header")
    dims = struct.unpack_from(f"<{nch}I", data, _MSF_HEAD.size)
    if any(d == 0 for d in dims):
        raise SchemaError(f"zero channel dim in header: {dims}")
    T, fps = struct.unpack_from("<Qf", data, _MSF_HEAD.size + 4 * nch)
    total = sum(dims)
    expected = head + T * nch + T * total * 4
    if len(data) < expected:
        raise LengthError(f"payload truncated: {len(data)} bytes, need {expected}")
    if len(data) > expected:
        raise LengthError(f"{len(data) - expected} trailing bytes after payload")
    presence = np.frombuffer(data, dtype=np.uint8, count=T * nch, offset=head).reshape(T, nch)
    if presence.size and presence.max() > 1:
        raise FormatError("presence bytes must be 0 or 1")
    flat = np.frombuffer(data, dtype="<f4", count=T * total, offset=head + T * nch).reshape(T, total)
    splits = np.cumsum(dims)[:-1]
    channels = [np.array(part, dtype=np.float32) for part in np.split(flat, splits, axis=1)]
    return FeatureSequence(channels, presence.astype(bool), float(fps))


def read_msf(path, dims: Sequence[int] | None = None) -> FeatureSequence:
    """Load an MSF file; if ``dims`` is given the header must declare exactly those dims."""
    with open(path, "rb") as fh:
        seq = decode_msf(fh.read())
    if dims is not None and tuple(seq.dims) != tuple(dims):
        raise SchemaError(f"{path}: dims {seq.dims} do not match expected {tuple(dims)}")
    return seq


def write_msf(seq: FeatureSequence, path, dims: Sequence[int] | None = None) -> None:
    seq.validate(dims)
    payload = encode_msf(seq)
    _atomic_write(path, payload)


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ------------------------------------------------------------- pre-processing


def interpolate_missing(seq: FeatureSequence, channel: int) -> FeatureSequence:
    """Fill absent cells of one channel by linear interpolation in time.

    Gaps bounded on both sides are interpolated linearly by temporal distance;
    leading and trailing gaps copy the nearest present frame.  A channel with
    no present frame stays zero and is reported in ``diagnostics``.
    """
    channel = int(channel)
    T = seq.num_frames
    present = seq.presence[:, channel]
    values = seq.channels[channel]
    out = values.copy()
    diagnostics = set(seq.diagnostics)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        out[:] = 0.0
        diagnostics.add(f"no_detections:{CHANNEL_NAMES[channel]}")
    elif idx.size < T:
        for t in np.flatnonzero(~present):
            hi = np.searchsorted(idx, t)
            if hi == 0:
                out[t] = values[idx[0]]
            elif hi == idx.size:
                out[t] = values[idx[-1]]
            else:
                t0, t1 = idx[hi - 1], idx[hi]
                w = (t - t0) / (t1 - t0)
                out[t] = ((1.0 - w) * values[t0].astype(np.float64) + w * values[t1].astype(np.float64)).astype(
                    np.float32
                )
    channels = list(seq.channels)
    channels[channel] = out
    presence = seq.presence.copy()
    presence[:, channel] = True
    return FeatureSequence(channels, presence, seq.frame_rate_hint, frozenset(diagnostics))


def interpolate_all(seq: FeatureSequence) -> FeatureSequence:
    for c in CHANNELS:
        seq = interpolate_missing(seq, c)
    return seq


@dataclass
class PoseLandmarks:
    """Seven upper-body points in image coordinates.

    Order: nose, left shoulder, right shoulder, left elbow, right elbow,
    left wrist, right wrist.
    """

    points: np.ndarray  # (7, 2)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (7, 2):
            raise SchemaError(f"pose needs 7 (x, y) points, got shape {self.points.shape}")


def normalize_pose(lm: PoseLandmarks, eps: float = 1e-9) -> np.ndarray:
    """Shoulder-midpoint origin, unit shoulder width, flattened to 14 floats.

    Per-frame; rotation is deliberately left untouched.
    """
    pts = lm.points
    left, right = pts[1], pts[2]
    width = float(np.hypot(*(right - left)))
    if width <= eps:
        raise DegeneratePoseError("shoulders coincide; pose cannot be normalized")
    centre = (left + right) / 2.0
    return ((pts - centre) / width).reshape(14)


def downsample(seq: FeatureSequence, stride: int) -> FeatureSequence:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    out = seq.select_frames(slice(0, None, int(stride)))
    out.frame_rate_hint = seq.frame_rate_hint / stride
    return out
