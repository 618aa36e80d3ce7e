import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signstream.cluster import fit_kmeans
from signstream.errors import DegeneratePoseError, FormatError, LengthError, SchemaError
from signstream.featio import (
    DEFAULT_DIMS,
    FeatureSequence,
    PoseLandmarks,
    decode_msf,
    downsample,
    encode_msf,
    interpolate_missing,
    msf_header_size,
    normalize_pose,
    read_msf,
    write_msf,
)
from signstream.synthetic import SyntheticSpec, gen_synthetic

SMALL_DIMS = (3, 2, 2, 4)


def make_seq(T, dims=SMALL_DIMS, seed=0, presence=None, fps=25.0):
    rng = np.random.default_rng(seed)
    chans = [rng.normal(size=(T, d)).astype(np.float32) for d in dims]
    pres = np.ones((T, 4), bool) if presence is None else np.asarray(presence, bool)
    for c in range(4):
        chans[c][~pres[:, c]] = 0.0
    return FeatureSequence(chans, pres, fps)


def hand_assembled_msf(dims, T, fps, presence, frames):
    """Byte-by-byte writer that follows the documented layout without numpy."""
    out = b"MSF1" + struct.pack("<I", 1) + struct.pack("<I", 4)
    for d in dims:
        out += struct.pack("<I", d)
    out += struct.pack("<Q", T) + struct.pack("<f", fps)
    for row in presence:
        for flag in row:
            out += bytes([1 if flag else 0])
    for frame in frames:
        for value in frame:
            out += struct.pack("<f", value)
    return out


def test_zero_frame_file(tmp_path):
    seq = FeatureSequence.from_present([np.zeros((1, d), np.float32) for d in DEFAULT_DIMS])
    path = tmp_path / "zero.msf"
    write_msf(seq, path)
    back = read_msf(path)
    assert back.num_frames == 1
    assert back.presence.all()
    assert all((c == 0).all() for c in back.channels)


def test_zero_frame_file_length(tmp_path):
    seq = FeatureSequence.from_present([np.zeros((1, d), np.float32) for d in DEFAULT_DIMS])
    path = tmp_path / "zero.msf"
    write_msf(seq, path)
    header = 4 + 4 + 4 + 4 * 4 + 8 + 4
    assert msf_header_size() == header
    assert path.stat().st_size == header + 4 + 1166 * 4


def test_rewrite_is_byte_identical(tmp_path):
    seq = make_seq(5, DEFAULT_DIMS, presence=np.random.default_rng(1).random((5, 4)) > 0.3)
    p1, p2 = tmp_path / "a.msf", tmp_path / "b.msf"
    write_msf(seq, p1)
    write_msf(read_msf(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_same_sequence_written_twice(tmp_path):
    seq = make_seq(4)
    write_msf(seq, tmp_path / "a.msf")
    write_msf(seq, tmp_path / "b.msf")
    assert (tmp_path / "a.msf").read_bytes() == (tmp_path / "b.msf").read_bytes()


def test_hand_assembled_file_decodes_to_known_values(tmp_path):
    dims = (2, 1, 1, 3)
    frames = [
        [0.5, -1.25, 2.0, 3.5, 0.0, 1.0, -2.0],
        [4.0, 8.0, -0.125, 16.0, 1.5, 2.5, 3.25],
    ]
    presence = [[1, 1, 0, 1], [1, 0, 1, 1]]
    path = tmp_path / "hand.msf"
    path.write_bytes(hand_assembled_msf(dims, 2, 12.5, presence, frames))
    seq = read_msf(path)
    assert seq.dims == dims
    assert seq.frame_rate_hint == 12.5
    assert seq.presence.tolist() == [[True, True, False, True], [True, False, True, True]]
    for t in range(2):
        assert seq.channels[0][t].tolist() == frames[t][0:2]
        assert seq.channels[1][t].tolist() == frames[t][2:3]
        assert seq.channels[2][t].tolist() == frames[t][3:4]
        assert seq.channels[3][t].tolist() == frames[t][4:7]
    assert encode_msf(seq) == path.read_bytes()


def test_dim_violation_rejected_before_writing(tmp_path):
    seq = make_seq(3, (384, 384, 384, 13))
    path = tmp_path / "bad.msf"
    with pytest.raises(SchemaError):
        write_msf(seq, path, dims=DEFAULT_DIMS)
    assert not path.exists()


def test_ragged_sequence_rejected(tmp_path):
    seq = make_seq(3)
    seq.channels[2] = seq.channels[2][:2]
    with pytest.raises(SchemaError):
        write_msf(seq, tmp_path / "bad.msf")


def test_corrupt_magic_and_version():
    data = bytearray(encode_msf(make_seq(2)))
    bad = bytes(b"XSF1" + data[4:])
    with pytest.raises(FormatError):
        decode_msf(bad)
    data[4] = 7
    with pytest.raises(FormatError):
        decode_msf(bytes(data))


def test_truncated_payload():
    data = encode_msf(make_seq(3))
    with pytest.raises(LengthError):
        decode_msf(data[:-1])
    with pytest.raises(LengthError):
        decode_msf(data[:10])


def test_declared_dims_mismatch(tmp_path):
    path = tmp_path / "s.msf"
    write_msf(make_seq(2), path)
    with pytest.raises(SchemaError):
        read_msf(path, dims=DEFAULT_DIMS)


@settings(max_examples=40, deadline=None)
@given(
    T=st.integers(1, 12),
    dims=st.tuples(*[st.integers(1, 6)] * 4),
    seed=st.integers(0, 2**32 - 1),
    fps=st.floats(0.125, 120.0, width=32),
)
def test_roundtrip_property(T, dims, seed, fps):
    rng = np.random.default_rng(seed)
    pres = rng.random((T, 4)) > 0.2
    seq = make_seq(T, dims, seed, pres, fps)
    assert decode_msf(encode_msf(seq)) == seq


# ---------------------------------------------------------------- interpolation


def one_channel(values, present):
    T = len(values)
    chans = [np.zeros((T, 2), np.float32) for _ in range(4)]
    chans[1] = np.asarray(values, np.float32)
    pres = np.ones((T, 4), bool)
    pres[:, 1] = present
    return FeatureSequence(chans, pres)


def test_midpoint():
    v0, v2 = [1.0, -2.0], [3.0, 6.0]
    out = interpolate_missing(one_channel([v0, [0, 0], v2], [1, 0, 1]), 1)
    assert out.channels[1][1].tolist() == [2.0, 2.0]
    assert out.presence[:, 1].all()


def test_leading_gap_copies_first_present():
    out = interpolate_missing(one_channel([[0, 0], [5.0, 7.0]], [0, 1]), 1)
    assert out.channels[1][0].tolist() == [5.0, 7.0]


def test_trailing_gap_copies_last_present():
    out = interpolate_missing(one_channel([[5.0, 7.0], [0, 0], [0, 0]], [1, 0, 0]), 1)
    assert out.channels[1][2].tolist() == [5.0, 7.0]


def test_linear_interpolation_over_long_gap():
    vals = [[0.0, 0.0], [0, 0], [0, 0], [3.0, 3.0]]
    out = interpolate_missing(one_channel(vals, [1, 0, 0, 1]), 1)
    np.testing.assert_allclose(out.channels[1][1], [1.0, 1.0], rtol=0, atol=1e-6)
    np.testing.assert_allclose(out.channels[1][2], [2.0, 2.0], rtol=0, atol=1e-6)


def test_no_detection_sets_diagnostic():
    out = interpolate_missing(one_channel([[1.0, 1.0], [2.0, 2.0]], [0, 0]), 1)
    assert (out.channels[1] == 0).all()
    assert out.presence[:, 1].all()
    assert any("left_hand" in d for d in out.diagnostics)


def test_other_channels_untouched():
    seq = make_seq(6, presence=np.random.default_rng(3).random((6, 4)) > 0.5)
    out = interpolate_missing(seq, 2)
    for c in (0, 1, 3):
        assert out.channels[c].tobytes() == seq.channels[c].tobytes()
        assert (out.presence[:, c] == seq.presence[:, c]).all()


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 15), seed=st.integers(0, 10_000), channel=st.integers(0, 3))
def test_interpolation_idempotent_and_preserves_present(T, seed, channel):
    rng = np.random.default_rng(seed)
    seq = make_seq(T, seed=seed, presence=rng.random((T, 4)) > 0.5)
    once = interpolate_missing(seq, channel)
    twice = interpolate_missing(once, channel)
    assert once == twice
    keep = seq.presence[:, channel]
    assert once.channels[channel][keep].tobytes() == seq.channels[channel][keep].tobytes()


# ----------------------------------------------------------------------- pose


def pose(points):
    return PoseLandmarks(np.asarray(points, dtype=float))


BASE_POSE = [(0, -1), (-1, 0), (1, 0), (-1.5, 1), (1.5, 1), (-1, 2), (1, 2)]


def test_pose_normalization_example():
    out = normalize_pose(pose(BASE_POSE)).reshape(7, 2)
    assert out[1].tolist() == [-0.5, 0.0]
    assert out[2].tolist() == [0.5, 0.0]
    assert out[0].tolist() == [0.0, -0.5]
    assert out.size == 14


def test_pose_translation_invariance():
    shifted = np.asarray(BASE_POSE) + 10.0
    np.testing.assert_array_equal(normalize_pose(pose(BASE_POSE)), normalize_pose(pose(shifted)))


def test_pose_scale_invariance():
    scaled = np.asarray(BASE_POSE) * 3.0
    np.testing.assert_array_equal(normalize_pose(pose(BASE_POSE)), normalize_pose(pose(scaled)))


@settings(max_examples=60, deadline=None)
@given(
    pts=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=7, max_size=7),
    shift=st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
    scale=st.floats(0.1, 10.0),
)
def test_pose_invariances_property(pts, shift, scale):
    pts = np.asarray(pts)
    if np.hypot(*(pts[1] - pts[2])) < 1e-2:
        return
    ref = normalize_pose(pose(pts))
    np.testing.assert_allclose(normalize_pose(pose(pts + np.asarray(shift))), ref, atol=1e-6)
    np.testing.assert_allclose(normalize_pose(pose(pts * scale)), ref, atol=1e-6)


def test_pose_not_rotation_invariant():
    rot = np.asarray(BASE_POSE) @ np.array([[0.0, -1.0], [1.0, 0.0]])
    assert not np.allclose(normalize_pose(pose(rot)), normalize_pose(pose(BASE_POSE)))


def test_coincident_shoulders():
    pts = list(BASE_POSE)
    pts[2] = pts[1]
    with pytest.raises(DegeneratePoseError):
        normalize_pose(pose(pts))


# ----------------------------------------------------------------- downsample


def frame_ids(seq):
    return seq.channels[0][:, 0].astype(int).tolist()


def indexed_seq(T):
    chans = [np.tile(np.arange(T, dtype=np.float32)[:, None], (1, d)) for d in SMALL_DIMS]
    return FeatureSequence.from_present(chans, frame_rate_hint=30.0)


def test_downsample_examples():
    assert frame_ids(downsample(indexed_seq(6), 2)) == [0, 2, 4]
    assert frame_ids(downsample(indexed_seq(5), 2)) == [0, 2, 4]
    assert downsample(indexed_seq(6), 2).frame_rate_hint == 15.0
    assert downsample(indexed_seq(6), 1) == indexed_seq(6)


def test_downsample_zero_stride():
    with pytest.raises(ValueError):
        downsample(indexed_seq(3), 0)


@given(T=st.integers(1, 40), a=st.integers(1, 5), b=st.integers(1, 5))
def test_downsample_composes(T, a, b):
    s = indexed_seq(T)
    assert frame_ids(downsample(downsample(s, a), b)) == frame_ids(downsample(s, a * b))


# ------------------------------------------------------------------ synthetic


def test_synthetic_deterministic():
    spec = SyntheticSpec(num_seqs=3, T_range=(5, 9), seed=42, num_latent_gestures=3, missing_rate=0.1)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert all(x == y for x, y in zip(a.sequences, b.sequences))
    assert all((x == y).all() for x, y in zip(a.gestures, b.gestures))
    assert (a.labels == b.labels).all()


def test_synthetic_seed_changes_data():
    a = gen_synthetic(SyntheticSpec(num_seqs=2, seed=1))
    b = gen_synthetic(SyntheticSpec(num_seqs=2, seed=2))
    assert a.sequences[0] != b.sequences[0]


def test_synthetic_empty():
    ds = gen_synthetic(SyntheticSpec(num_seqs=0))
    assert len(ds) == 0 and ds.labels.size == 0


@pytest.mark.parametrize("bad", [dict(T_range=(5, 4)), dict(T_range=(0, 3)), dict(span_range=(3, 1))])
def test_synthetic_empty_ranges(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad)


def test_single_gesture_k1_inertia_is_total_variance():
    spec = SyntheticSpec(num_seqs=4, T_range=(20, 30), seed=5, num_latent_gestures=1, dims=(8, 8, 8, 4))
    ds = gen_synthetic(spec)
    assert set(np.concatenate(ds.gestures).tolist()) == {0}
    for c in range(4):
        x = np.concatenate([s.channels[c] for s in ds.sequences]).astype(np.float64)
        total_variance = x.shape[0] * x.var(axis=0).sum()
        model = fit_kmeans(x, k=1, seed=0)
        assert model.inertia_history[-1] == pytest.approx(total_variance, rel=1e-9)


def test_synthetic_labels_and_presence():
    spec = SyntheticSpec(num_seqs=6, T_range=(16, 16), seed=3, num_latent_gestures=3, num_styles=2,
                         style_scale=0.1, single_gesture=True, missing_rate=0.2, dims=(4, 4, 4, 2))
    ds = gen_synthetic(spec)
    for seq, g, lab, sty in zip(ds.sequences, ds.gestures, ds.labels, ds.styles):
        assert (g == g[0]).all()
        assert lab == g[0] * 2 + sty
        assert seq.presence[:, [0, 3]].all()
        for c in (1, 2):
            assert (seq.channels[c][~seq.presence[:, c]] == 0).all()


def test_whole_cycles_have_class_independent_channel_means():
    spec = SyntheticSpec(num_seqs=2, T_range=(16, 16), seed=0, num_latent_gestures=5, noise=0.0,
                         single_gesture=True, dims=(4, 4, 4, 2))
    ds = gen_synthetic(spec)
    for c in range(4):
        np.testing.assert_allclose(ds.sequences[0].channels[c].mean(0), ds.sequences[1].channels[c].mean(0), atol=1e-6)
