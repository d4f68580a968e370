import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgcn.datasets import (
    DatasetFile,
    SyntheticMotionSpec,
    bones_dataset,
    from_bytes,
    joints_to_bones,
    load,
    nearest_centroid_accuracy,
    preprocess,
    save,
    split_halves,
    synthesize,
    to_bytes,
)
from sgcn.errors import ConfigurationError, DataError, FormatError
from sgcn.graph import SkeletonTopology, tree_topology


def random_dataset(n=4, V=5, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(n, 3, 300, V, 2)).astype(np.float32).astype(np.float64)
    return DatasetFile(data, rng.integers(classes, size=n), classes, tree_topology(V))


# -- file format -------------------------------------------------------------------


def test_roundtrip_bitwise(tmp_path):
    ds = random_dataset()
    save(ds, tmp_path / "d.skel")
    back = load(tmp_path / "d.skel")
    assert np.array_equal(back.data, ds.data) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 3 and back.topology.edges == ds.topology.edges
    assert to_bytes(back) == to_bytes(ds)


def test_header_layout():
    ds = random_dataset(n=2, V=4)
    buf = to_bytes(ds)
    assert buf[:5] == b"SKEL1"
    assert struct.unpack_from("<HHIH", buf, 5) == (4, 3, 2, 3)
    assert len(buf) == 15 + 3 * 4 + 2 * (4 + 4 * 3 * 300 * 4 * 2)


def test_bad_magic_reports_offset_zero():
    buf = bytearray(to_bytes(random_dataset(n=1)))
    buf[:5] = b"SKEL0"
    with pytest.raises(FormatError, match="offset 0"):
        from_bytes(bytes(buf))


def test_truncated_payload_names_lengths():
    buf = to_bytes(random_dataset(n=2))
    with pytest.raises(FormatError, match=f"expected {len(buf)} bytes.*found {len(buf) - 7}"):
        from_bytes(buf[:-7])


def test_trailing_bytes_rejected():
    buf = to_bytes(random_dataset(n=1))
    with pytest.raises(FormatError):
        from_bytes(buf + b"\0")


def test_truncated_header():
    with pytest.raises(FormatError):
        from_bytes(b"SKEL1\x05")


def test_label_out_of_range():
    buf = bytearray(to_bytes(random_dataset(n=1, V=2)))
    off = 15 + 4
    buf[off:off + 4] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match=f"offset {off}"):
        from_bytes(bytes(buf))


def test_dataset_shape_checked():
    with pytest.raises(DataError):
        DatasetFile(np.zeros((1, 3, 10, 4, 2)), [0], 2, tree_topology(4))
    with pytest.raises(DataError):
        DatasetFile(np.zeros((1, 3, 300, 4, 2)), [2], 2, tree_topology(4))


# -- preprocessing --------------------------------------------------------------------


def test_preprocess_repeats_whole_clip():
    clip = np.random.default_rng(0).normal(size=(3, 100, 4, 1))
    out = preprocess(clip)
    for r in range(3):
        np.testing.assert_array_equal(out[:, 100 * r:100 * (r + 1), :, 0], clip[..., 0])


def test_preprocess_truncates_partial_repeat():
    clip = np.arange(3 * 7 * 2 * 1, dtype=float).reshape(3, 7, 2, 1)
    out = preprocess(clip)
    assert out.shape == (3, 300, 2, 2)
    np.testing.assert_array_equal(out[:, 294:300, :, 0], clip[:, :6, :, 0])


def test_preprocess_pads_second_body():
    out = preprocess(np.ones((3, 300, 5, 1)))
    assert np.all(out[..., 1] == 0) and np.all(out[..., 0] == 1)


def test_preprocess_fixed_point():
    clip = np.random.default_rng(1).normal(size=(3, 300, 5, 2))
    np.testing.assert_array_equal(preprocess(clip), clip)


@pytest.mark.parametrize("shape", [(3, 0, 4, 1), (3, 5, 4, 3), (2, 5, 4, 1), (3, 5, 4)])
def test_preprocess_rejects(shape):
    with pytest.raises(DataError):
        preprocess(np.zeros(shape))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 320), st.integers(1, 2), st.integers(0, 999))
def test_preprocess_idempotent(t0, bodies, seed):
    clip = np.random.default_rng(seed).normal(size=(3, t0, 3, bodies))
    once = preprocess(clip)
    np.testing.assert_array_equal(preprocess(once), once)


# -- bones -------------------------------------------------------------------------


def test_bone_example():
    topo = SkeletonTopology(2, [(0, 1)], parent=[-1, 0])
    x = np.zeros((3, 1, 2, 1))
    x[:, 0, 0, 0] = [0, 1, 0]
    x[:, 0, 1, 0] = [1, 1, 0]
    b = joints_to_bones(x, topo)
    np.testing.assert_array_equal(b[:, 0, 1, 0], [1, 0, 0])
    np.testing.assert_array_equal(b[:, 0, 0, 0], [0, 0, 0])


def test_bones_of_zero_skeleton():
    topo = tree_topology(6).with_parents()
    assert not np.any(joints_to_bones(np.zeros((3, 4, 6, 2)), topo))


def test_bones_need_parents():
    with pytest.raises(ConfigurationError):
        joints_to_bones(np.zeros((3, 1, 2, 1)), SkeletonTopology(2, [(0, 1)]))


def test_bones_joint_mismatch():
    with pytest.raises(DataError):
        joints_to_bones(np.zeros((3, 1, 3, 1)), tree_topology(4).with_parents())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 9999))
def test_bones_linear(V, a, b, seed):
    rng = np.random.default_rng(seed)
    topo = tree_topology(V).with_parents()
    x, y = rng.normal(size=(2, 3, 5, V, 2))
    np.testing.assert_allclose(joints_to_bones(a * x + b * y, topo),
                               a * joints_to_bones(x, topo) + b * joints_to_bones(y, topo), atol=1e-12)


def test_bones_dataset_keeps_labels():
    ds = random_dataset()
    bd = bones_dataset(ds)
    assert np.array_equal(bd.labels, ds.labels) and bd.data.shape == ds.data.shape


# -- splits ------------------------------------------------------------------------


def test_split_halves_partition():
    a, b = split_halves(11, seed=3)
    assert len(a) == 5 and len(b) == 6
    assert sorted(np.r_[a, b].tolist()) == list(range(11))
    a2, _ = split_halves(11, seed=3)
    assert np.array_equal(a, a2)


# -- synthetic motion ----------------------------------------------------------------


def test_synth_counts_balanced():
    ds = synthesize(SyntheticMotionSpec(num_classes=3, samples_per_class=100, joints=8, frames=16), rng=0)
    assert len(ds) == 300
    assert np.bincount(ds.labels).tolist() == [100, 100, 100]


def test_synth_deterministic(tmp_path):
    spec = SyntheticMotionSpec(num_classes=3, samples_per_class=5, joints=6, frames=20)
    save(synthesize(spec, rng=7), tmp_path / "a")
    save(synthesize(spec, rng=7), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_synth_signatures_distinct():
    spec = SyntheticMotionSpec(num_classes=6, joints=8)
    keys = [tuple(sorted(tuple(sorted(p)) for p in s.pairs)) for s in spec.signatures]
    assert len(set(keys)) == 6
    assert len({s.frequency for s in spec.signatures}) == 6


def test_synth_noise_free_centroid_oracle():
    ds = synthesize(SyntheticMotionSpec(num_classes=4, samples_per_class=10, joints=8, frames=32, noise_std=0.0), rng=1)
    assert nearest_centroid_accuracy(ds) == 1.0


def test_synth_noise_free_clips_equal_template():
    ds = synthesize(SyntheticMotionSpec(num_classes=2, samples_per_class=3, joints=5, frames=10, noise_std=0.0), rng=2)
    for c in range(2):
        clips = ds.data[ds.labels == c]
        assert np.all(clips == clips[0])


def test_synth_clip_is_tiled_single_body():
    ds = synthesize(SyntheticMotionSpec(num_classes=2, samples_per_class=1, joints=5, frames=64), rng=0)
    np.testing.assert_array_equal(ds.data[0, :, :64], ds.data[0, :, 64:128])
    assert not np.any(ds.data[..., 1])


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(samples_per_class=0), dict(joints=1),
                                dict(frames=0), dict(frames=301), dict(noise_std=-1.0)])
def test_synthetic_params_validation(kw):
    with pytest.raises(ConfigurationError):
        SyntheticMotionSpec(**kw)
