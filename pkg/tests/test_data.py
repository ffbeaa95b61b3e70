import struct

import numpy as np
import pytest

from liboost import data, zoo


def write_idx_pair(tmp_path, images, labels):
    """images: (N, H, W) uint8; labels: (N,) uint8."""
    n, h, w = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    lbl_path = tmp_path / "labels-idx1-ubyte"
    img_path.write_bytes(struct.pack(">4I", 0x803, n, h, w) + images.tobytes())
    lbl_path.write_bytes(struct.pack(">2I", 0x801, n) + labels.tobytes())
    return img_path, lbl_path


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (12, 9, 7), dtype=np.uint8)
    labels = rng.integers(0, 4, 12, dtype=np.uint8)
    labels[0] = 3  # pin the class count
    return write_idx_pair(tmp_path, images, labels), (images, labels)


def test_load_idx_roundtrip(idx_pair):
    (img_path, lbl_path), (images, labels) = idx_pair
    ds = data.load_idx(img_path, lbl_path)
    assert len(ds) == 12
    assert ds.images.shape == (12, 1, 9, 7)
    assert ds.classes == 4
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    assert np.allclose(ds.images[:, 0] * 255.0, images)


def test_pixel_255_is_exactly_one(tmp_path):
    images = np.full((1, 2, 2), 255, dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
    ds = data.load_idx(img_path, lbl_path)
    assert np.all(ds.images == 1.0)


def test_load_idx_bad_image_magic(idx_pair, tmp_path):
    (img_path, lbl_path), _ = idx_pair
    blob = bytearray(img_path.read_bytes())
    blob[3] = 0x99
    bad = tmp_path / "bad-images"
    bad.write_bytes(bytes(blob))
    with pytest.raises(data.IdxFormatError, match="magic"):
        data.load_idx(bad, lbl_path)


def test_load_idx_bad_label_magic(idx_pair, tmp_path):
    (img_path, lbl_path), _ = idx_pair
    blob = bytearray(lbl_path.read_bytes())
    blob[3] = 0x00
    bad = tmp_path / "bad-labels"
    bad.write_bytes(bytes(blob))
    with pytest.raises(data.IdxFormatError, match="magic"):
        data.load_idx(img_path, bad)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    (img_path, _), (_, labels) = idx_pair
    short = tmp_path / "short-labels"
    short.write_bytes(struct.pack(">2I", 0x801, 5) + labels[:5].tobytes())
    with pytest.raises(data.IdxFormatError, match="count"):
        data.load_idx(img_path, short)


def test_load_idx_truncated_payload(idx_pair, tmp_path):
    (img_path, lbl_path), _ = idx_pair
    blob = img_path.read_bytes()
    trunc = tmp_path / "trunc-images"
    trunc.write_bytes(blob[:-10])
    with pytest.raises(data.IdxFormatError, match="payload"):
        data.load_idx(trunc, lbl_path)


def test_save_idx_roundtrip(tmp_path):
    ds = data.synth_shapes(10, seed=1)
    img_path, lbl_path = tmp_path / "img", tmp_path / "lbl"
    data.save_idx(ds, img_path, lbl_path)
    back = data.load_idx(img_path, lbl_path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255.0  # u8 quantization


def test_synth_deterministic():
    a = data.synth_shapes(60, seed=3)
    b = data.synth_shapes(60, seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = data.synth_shapes(60, seed=4)
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("style,noise,clutter", [("solid", 0.0, 0), ("outline", 0.1, 4)])
def test_synth_pixel_range(style, noise, clutter):
    classes = data.GLYPH_CLASSES if style == "outline" else data.SHAPE_CLASSES
    ds = data.synth_shapes(50, seed=5, classes=classes, style=style, noise=noise, clutter=clutter)
    assert ds.images.min() >= 0.0
    assert ds.images.max() <= 1.0


def test_synth_respects_margin():
    """Shape/clutter mass stays >= 4 px away from every border (no noise)."""
    for style in ("solid", "outline"):
        ds = data.synth_shapes(80, seed=6, style=style, clutter=3)
        border = np.concatenate(
            [
                ds.images[:, :, :4, :].ravel(),
                ds.images[:, :, -4:, :].ravel(),
                ds.images[:, :, :, :4].ravel(),
                ds.images[:, :, :, -4:].ravel(),
            ]
        )
        assert border.max() == 0.0


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        data.synth_shapes(0, seed=1)
    with pytest.raises(ValueError):
        data.synth_shapes(5, seed=1, style="wireframe")
    with pytest.raises(ValueError, match="solid style"):
        data.synth_shapes(5, seed=1, classes=("triangle",), style="solid")


def test_synth_glyph_accuracy_pilot():
    """cnn-a separates the solid three-class set almost perfectly (pilot)."""
    train = data.synth_shapes(1000, seed=3)
    test = data.synth_shapes(250, seed=7, split="test")
    model = zoo.build(zoo.ModelSpec("cnn-a", (1, 28, 28), 3), seed=11)
    _, trace = zoo.train(model, train, epochs=3, lr=0.05, momentum=0.9, batch=32, seed=5, test_set=test)
    assert trace[-1]["test_acc"] >= 0.98


def test_attack_subset_permutation():
    ds = data.synth_shapes(40, seed=8)
    sub = data.attack_subset(ds, 40, seed=9)
    assert sorted(sub.source_indices.tolist()) == list(range(40))
    assert not np.array_equal(sub.source_indices, np.arange(40))  # actually shuffled
    assert np.array_equal(ds.images[sub.source_indices], sub.images)


def test_attack_subset_deterministic():
    ds = data.synth_shapes(50, seed=10)
    a = data.attack_subset(ds, 20, seed=11)
    b = data.attack_subset(ds, 20, seed=11)
    assert np.array_equal(a.source_indices, b.source_indices)


def test_attack_subset_requires_enough_eligible():
    ds = data.synth_shapes(30, seed=12)
    model = zoo.build(zoo.ModelSpec("mlp-2x256", (1, 28, 28), 3), seed=1)
    for t in model.params.values():
        t.data[:] = 0.0
    model.params["fc3.b"].data[:] = [0.0, 1.0, 0.0]  # constant wrong-ish predictor
    eligible = int(np.sum(ds.labels == 1))
    with pytest.raises(ValueError, match="fewer than"):
        data.attack_subset(ds, eligible + 1, seed=13, require_correct=model)


def test_attack_subset_n_too_large():
    ds = data.synth_shapes(10, seed=14)
    with pytest.raises(ValueError, match="exceeds"):
        data.attack_subset(ds, 11, seed=15)
