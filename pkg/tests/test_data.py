import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdt.data import (
    DataError,
    DatasetSpec,
    IdxParseError,
    batches,
    channel_stats,
    denormalize,
    gen_synthetic_pairs,
    heldout_split,
    load_dataset,
    normalize,
    pair_layout,
    parse_idx,
    read_idx,
    resize_nearest,
    write_idx,
)
from mdt.evaluation import measure_pair_amplitudes


def _idx_bytes(dims, payload):
    return bytes([0, 0, 8, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + bytes(list(payload))


# --------------------------------------------------------------------------
# IDX


def test_idx_header_decode():
    arr = parse_idx(_idx_bytes((10, 28, 28), np.arange(7840) % 256))
    assert arr.shape == (10, 28, 28) and arr.dtype == np.uint8
    assert arr[0, 0, 5] == 5


def test_idx_errors_carry_offsets():
    with pytest.raises(IdxParseError, match="expected 7840 bytes, got 100") as err:
        parse_idx(_idx_bytes((10, 28, 28), range(100)))
    assert err.value.offset == 16 + 100
    with pytest.raises(IdxParseError) as err:
        parse_idx(b"\x01\x00\x08\x01" + b"\x00" * 8)
    assert err.value.offset == 0
    with pytest.raises(IdxParseError) as err:
        parse_idx(b"\x00\x00\x0d\x01")
    assert err.value.offset == 2
    with pytest.raises(IdxParseError, match="dimension table"):
        parse_idx(b"\x00\x00\x08\x03\x00\x00")
    with pytest.raises(IdxParseError):
        parse_idx(b"\x00\x00")


def test_read_idx_scaling_resize_and_channels(tmp_path):
    imgs = np.zeros((3, 4, 4), dtype=np.uint8)
    imgs[:, :2] = 255
    imgs[2] = 0
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", np.array([1, 0, 1], dtype=np.uint8))
    spec = DatasetSpec(kind="idx-images", c=2, h=8, w=8, size=0, path=str(tmp_path / "x.idx"), labels_path=str(tmp_path / "y.idx"))
    ds = read_idx(spec.path, spec)
    raw = ds.denormalize(ds.x.astype(np.float64))
    assert ds.x.shape == (3, 2, 8, 8)
    np.testing.assert_allclose(raw[0, 0, :4], 1.0, atol=1e-6)
    np.testing.assert_allclose(raw[0, 1, 4:], -1.0, atol=1e-6)
    np.testing.assert_allclose(raw[2], -1.0, atol=1e-6)
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    assert load_dataset(spec).x.shape == (3, 2, 8, 8)


def test_resize_nearest_uses_integer_indices():
    img = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(resize_nearest(img, 2, 2), [[0, 2], [8, 10]])
    np.testing.assert_array_equal(resize_nearest(img, 8, 8)[::2, ::2], img)


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "x.idx", np.zeros((2, 4, 4), np.uint8))
    write_idx(tmp_path / "y.idx", np.zeros(3, np.uint8))
    with pytest.raises(DataError):
        read_idx(str(tmp_path / "x.idx"), labels_path=str(tmp_path / "y.idx"))


# --------------------------------------------------------------------------
# synthetic pairs


def test_pair_members_share_amplitude():
    ds = gen_synthetic_pairs(DatasetSpec(size=512, seed=0))
    assert ds.amplitudes.shape == (512, 1)
    # rendering without noise gives identical left/right responses
    clean = gen_synthetic_pairs(DatasetSpec(size=64, seed=0))
    raw = clean.denormalize(clean.x.astype(np.float64))
    amps = measure_pair_amplitudes(raw, clean.labels, clean.layout)
    assert np.corrcoef(amps[:, 0], amps[:, 1])[0, 1] > 0.99


def test_normalized_statistics():
    ds = gen_synthetic_pairs(DatasetSpec(size=4096, seed=0))
    m = ds.x.mean(axis=(0, 2, 3))
    s = ds.x.std(axis=(0, 2, 3))
    assert np.all(np.abs(m) < 0.05) and np.all(np.abs(s - 1) < 0.05)


def test_class_centroids_are_separated():
    layout = pair_layout(2, 1, 2, 8, 8)
    assert np.linalg.norm(layout.class_centroid(0) - layout.class_centroid(1)) > 2
    big = pair_layout(4, 2, 3, 16, 16)
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.linalg.norm(big.class_centroid(a) - big.class_centroid(b)) > 2


def test_mirror_symmetry_of_layout():
    layout = pair_layout(3, 2, 1, 16, 16)
    for k in range(3):
        for j in range(2):
            (r0, c0), (r1, c1) = layout.centers[k, j]
            assert r0 == r1 and c0 + c1 == 15


def test_generator_deterministic_and_seed_sensitive():
    a = gen_synthetic_pairs(DatasetSpec(size=32, seed=1))
    b = gen_synthetic_pairs(DatasetSpec(size=32, seed=1))
    c = gen_synthetic_pairs(DatasetSpec(size=32, seed=2))
    np.testing.assert_array_equal(a.x, b.x)
    rows_a = {r.tobytes() for r in a.x}
    assert not rows_a & {r.tobytes() for r in c.x}


@pytest.mark.parametrize("kw", [dict(h=6, w=6), dict(h=12, w=12), dict(c=0), dict(h=8, w=8, pairs=3)])
def test_generator_rejects_bad_geometry(kw):
    with pytest.raises(DataError):
        gen_synthetic_pairs(DatasetSpec(size=4, **kw))


def test_heldout_split_shares_normalization():
    ds = gen_synthetic_pairs(DatasetSpec(size=256, seed=0))
    ref = heldout_split(ds, 128, 99)
    np.testing.assert_array_equal(ref.mean, ds.mean)
    assert len(ref) == 128 and np.array_equal(ref.layout.centers, ds.layout.centers)
    assert not np.array_equal(ref.x[:8], ds.x[:8])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_normalization_roundtrip(c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, c, 3, 3)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
    mean, std = channel_stats(x)
    np.testing.assert_allclose(denormalize(normalize(x, mean, std), mean, std), x, rtol=0, atol=1e-6)


# --------------------------------------------------------------------------
# batching


def _ds(n=50):
    return gen_synthetic_pairs(DatasetSpec(size=n, seed=0))


def test_same_seed_same_batches():
    a, b = batches(_ds(), 8, 3), batches(_ds(), 8, 3)
    for _ in range(12):
        np.testing.assert_array_equal(next(a)["index"], next(b)["index"])


def test_epoch_covers_dataset_once():
    it = batches(_ds(50), 8, 0)
    idx = np.concatenate([b["index"] for b in it.epoch_batches()])
    assert sorted(idx.tolist()) == list(range(50))
    assert it.epoch == 0
    nxt = next(it)
    assert it.epoch == 1 and len(nxt["index"]) == 8


def test_drop_last_skips_partial_batch():
    it = batches(_ds(50), 8, 0, drop_last=True)
    assert [len(b["index"]) for b in it.epoch_batches()] == [8] * 6


def test_resume_mid_epoch_reproduces_remaining_batches():
    it = batches(_ds(50), 8, 5)
    for _ in range(3):
        next(it)
    state = it.state_dict()
    expected = [next(it)["index"] for _ in range(10)]
    other = batches(_ds(50), 8, 999)
    other.load_state_dict(state)
    for e in expected:
        np.testing.assert_array_equal(next(other)["index"], e)


def test_batch_larger_than_dataset():
    with pytest.raises(DataError):
        batches(_ds(4), 8, 0)
