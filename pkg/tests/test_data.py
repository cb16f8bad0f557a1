import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfens import data
from selfens.data import DomainDataset, IdxFormatError, Shift, SyntheticSpec


def small_spec(**kw):
    base = dict(n_train=200, n_test=100, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


# --- IDX ---------------------------------------------------------------------


def test_idx_uint8_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (2, 4, 4), dtype=np.uint8)
    data.write_idx(tmp_path / "x.idx", imgs)
    raw = (tmp_path / "x.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (2, 4, 4)
    back = data.read_idx(tmp_path / "x.idx")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, imgs)


@settings(max_examples=30, deadline=None)
@given(arr=arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))))
def test_idx_round_trip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("idx") / "a.idx"
    data.write_idx(p, arr)
    np.testing.assert_array_equal(data.read_idx(p), arr)


def test_idx_float32_round_trip(tmp_path):
    arr = np.random.default_rng(1).standard_normal((3, 5, 5, 1)).astype(np.float32)
    data.write_idx(tmp_path / "f.idx", arr)
    assert data.read_idx(tmp_path / "f.idx").tobytes() == arr.tobytes()


def test_load_idx_scales_and_standardizes(tmp_path):
    imgs = np.random.default_rng(2).integers(0, 256, (20, 4, 4), dtype=np.uint8)
    labels = np.arange(20, dtype=np.uint8) % 10
    data.write_idx(tmp_path / "i.idx", imgs)
    data.write_idx(tmp_path / "l.idx", labels)
    raw = data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx", standardize_images=False)
    np.testing.assert_allclose(raw.images[..., 0], imgs / 255.0, atol=1e-7)
    assert raw.labels.tolist() == labels.tolist() and raw.class_count == 10
    z = data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert abs(z.images.mean()) <= 1e-6
    assert abs(z.images.std() - 1) <= 1e-6


def test_idx_bad_magic_names_offset(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x00\x00" + b"\x00" * 12)
    with pytest.raises(IdxFormatError, match="offset 0"):
        data.read_idx(tmp_path / "bad.idx")


def test_idx_truncated_payload(tmp_path):
    data.write_idx(tmp_path / "t.idx", np.zeros((2, 4, 4), np.uint8))
    blob = (tmp_path / "t.idx").read_bytes()
    (tmp_path / "t.idx").write_bytes(blob[:-3])
    with pytest.raises(IdxFormatError, match="offset 16.*truncated"):
        data.read_idx(tmp_path / "t.idx")


def test_idx_label_count_mismatch(tmp_path):
    data.write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), np.uint8))
    data.write_idx(tmp_path / "l.idx", np.zeros(2, np.uint8))
    with pytest.raises(IdxFormatError, match="2 labels for 3 images"):
        data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx")


def test_label_out_of_range():
    with pytest.raises(ValueError, match="labels must lie"):
        DomainDataset("d", np.zeros((1, 2, 2, 1), np.float32), np.array([10]), class_count=10)


def test_save_idx_writes_raw_pixels(tmp_path):
    ds = data.standardize(DomainDataset("d", np.random.default_rng(3).random((4, 3, 3, 1)).astype(np.float32), np.arange(4), 4))
    data.save_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
    back = data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx", standardize_images=False)
    np.testing.assert_allclose(back.images, data.destandardize(ds).images, atol=1e-6)


# --- standardization and preparation ------------------------------------------


@settings(max_examples=30, deadline=None)
@given(arr=arrays(np.float32, st.tuples(st.integers(2, 5), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
                  elements=st.floats(0, 1, width=32)))
def test_standardize_destandardize_identity(arr):
    ds = DomainDataset("d", arr)
    z = data.standardize(ds)
    np.testing.assert_allclose(data.destandardize(z).images, arr, atol=1e-6)
    flat = z.images.reshape(-1, arr.shape[-1]).astype(np.float64)
    assert np.abs(flat.mean(axis=0)).max() <= 1e-6
    varying = arr.reshape(-1, arr.shape[-1]).std(axis=0) > 1e-3
    np.testing.assert_allclose(flat.std(axis=0)[varying], 1.0, atol=1e-5)


def test_pad_to_centres_with_zero_border():
    ds = DomainDataset("m", np.ones((2, 28, 28, 1), np.float32))
    out = data.prepare(ds, [data.PadTo(32, 32)])
    assert out.shape == (32, 32, 1)
    assert out.images[:, 2:30, 2:30].min() == 1.0
    assert out.images[:, :2].max() == 0 and out.images[:, 30:].max() == 0
    assert out.images[:, :, :2].max() == 0 and out.images[:, :, 30:].max() == 0


def test_replicate_channels():
    ds = DomainDataset("m", np.random.default_rng(0).random((3, 4, 4, 1)).astype(np.float32))
    out = data.prepare(ds, [data.ReplicateChannels(3)])
    assert out.shape == (4, 4, 3)
    for c in range(3):
        np.testing.assert_array_equal(out.images[..., c], ds.images[..., 0])


def test_filter_classes_relabels_densely():
    labels = np.arange(100) % 10
    ds = DomainDataset("c", np.zeros((100, 2, 2, 1), np.float32), labels, 10)
    out = data.prepare(ds, [data.FilterClasses((0, 1, 2, 3, 4, 5, 7, 8, 9))])
    assert len(out) == 90 and out.class_count == 9
    assert sorted(set(out.labels.tolist())) == list(range(9))
    kept = labels[labels != 6]
    np.testing.assert_array_equal(out.labels, np.where(kept > 6, kept - 1, kept))


def test_resize_same_size_is_identity_and_upscale_shape():
    img = np.random.default_rng(0).random((2, 16, 16, 1)).astype(np.float32)
    np.testing.assert_allclose(data.resize_bilinear(img, 16, 16), img, atol=1e-6)
    up = data.resize_bilinear(img, 28, 28)
    assert up.shape == (2, 28, 28, 1)
    # align-corners: the four corners are preserved
    np.testing.assert_allclose(up[:, [0, 0, -1, -1], [0, -1, 0, -1]], img[:, [0, 0, -1, -1], [0, -1, 0, -1]], atol=1e-6)


def test_resize_of_linear_ramp_stays_linear():
    ramp = np.linspace(0, 1, 16, dtype=np.float64)[None, None, :, None] * np.ones((1, 16, 1, 1))
    up = data.resize_bilinear(ramp, 16, 31)
    np.testing.assert_allclose(up[0, 0, :, 0], np.linspace(0, 1, 31), atol=1e-12)


def test_prepare_errors():
    ds = DomainDataset("m", np.zeros((1, 8, 8, 3), np.float32))
    with pytest.raises(ValueError):
        data.prepare(ds, [data.PadTo(4, 4)])
    with pytest.raises(ValueError):
        data.prepare(ds, [data.ReplicateChannels(3)])
    with pytest.raises(ValueError):
        data.prepare(ds, [data.FilterClasses((0,))])


def test_parse_step():
    assert data.parse_step({"op": "pad_to", "h": 32, "w": 32}) == data.PadTo(32, 32)
    assert data.parse_step({"op": "filter_classes", "keep": [0, 2]}) == data.FilterClasses((0, 2))
    with pytest.raises(ValueError):
        data.parse_step({"op": "rotate"})


# --- synthetic domains ------------------------------------------------------


def test_gen_synthetic_deterministic():
    a_src, a_tgt = data.gen_synthetic(small_spec())
    b_src, b_tgt = data.gen_synthetic(small_spec())
    for x, y in ((a_src.train, b_src.train), (a_tgt.test, b_tgt.test)):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    c_src, _ = data.gen_synthetic(small_spec(seed=4))
    assert c_src.train.images.tobytes() != a_src.train.images.tobytes()


def test_gen_synthetic_shapes_and_balance():
    src, tgt = data.gen_synthetic(small_spec())
    assert src.train.shape == (16, 16, 1)
    assert len(src.train) == 200 and len(tgt.test) == 100
    np.testing.assert_array_equal(np.bincount(src.train.labels, minlength=10), 20)
    np.testing.assert_array_equal(np.bincount(tgt.train.labels, minlength=10), 20)


def test_source_statistics_standardize_both_domains():
    src, tgt = data.gen_synthetic(small_spec())
    assert abs(src.train.images.mean()) <= 1e-6
    assert abs(src.train.images.std() - 1) <= 1e-5
    np.testing.assert_array_equal(src.train.mean, tgt.train.mean)
    np.testing.assert_array_equal(src.train.std, tgt.test.std)


def test_inverted_target_mean_mirrors_source():
    src, tgt = data.gen_synthetic(small_spec(n_train=2000, shift=Shift(intensity_invert=True)))
    assert abs(tgt.train.images.mean() - (-src.train.images.mean())) <= 0.05


def test_null_shift_matches_source_distribution():
    raw = data.synthetic_raw(small_spec(n_train=2000, shift=Shift()))
    assert abs(raw["source_train"].images.mean() - raw["target_train"].images.mean()) < 0.01
    assert abs(raw["source_train"].images.std() - raw["target_train"].images.std()) < 0.01


def test_class_weights_frequency():
    w = (0.5,) + (0.5 / 9,) * 9
    raw = data.synthetic_raw(SyntheticSpec(n_train=10_000, n_test=10, seed=0, shift=Shift(class_weights=w)))
    freq = np.bincount(raw["target_train"].labels, minlength=10) / 10_000
    assert abs(freq[0] - 0.5) <= 0.02
    # the held-out target split stays balanced
    assert raw["target_test"].labels.tolist().count(0) == 1


def test_glyph_classes_are_distinct():
    raw = data.synthetic_raw(small_spec(shift=Shift()))
    protos = np.stack([raw["source_train"].images[raw["source_train"].labels == c].mean(0).ravel() for c in range(10)])
    d = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
    assert d[~np.eye(10, dtype=bool)].min() > 0.5


@pytest.mark.parametrize("kw", [dict(kind="digits"), dict(class_count=1), dict(class_count=len(data.GLYPHS) + 1),
                                dict(shift=Shift(class_weights=(0.5, 0.5)))])
def test_synthetic_spec_validation(kw):
    with pytest.raises(ValueError):
        small_spec(**kw)


def test_blobs_kind():
    src, tgt = data.gen_synthetic(small_spec(kind="blobs", class_count=6))
    assert src.train.class_count == 6 and src.train.shape == (16, 16, 1)


# --- batching -------------------------------------------------------------------


def test_batch_iter_single_pass():
    batches = list(data.batch_iter(10, 3, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_batch_iter_cycles():
    order = np.concatenate(list(data.batch_iter(10, 4, np.random.default_rng(0), epoch_size=20)))
    np.testing.assert_array_equal(np.bincount(order), 2)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), b=st.integers(1, 12), extra=st.integers(0, 50), seed=st.integers(0, 1000))
def test_batch_iter_properties(n, b, extra, seed):
    size = n + extra
    first = [x.tolist() for x in data.batch_iter(n, b, np.random.default_rng(seed), size)]
    again = [x.tolist() for x in data.batch_iter(n, b, np.random.default_rng(seed), size)]
    assert first == again
    flat = [i for batch in first for i in batch]
    assert len(flat) == size and all(len(x) <= b for x in first)
    counts = np.bincount(flat, minlength=n)
    assert counts.max() - counts.min() <= 1 + extra // n


def test_batch_iter_empty():
    with pytest.raises(ValueError):
        next(data.batch_iter(0, 3, np.random.default_rng(0)))
