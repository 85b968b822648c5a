import struct

import numpy as np
import pytest

from blrnet import datagen
from blrnet.data import (DatasetError, augment, augment_batch, load_cifar10,
                         load_mnist, read_idx_images, read_idx_labels,
                         resolve_data_dir, translate_flip, zca_apply, zca_fit)
from blrnet.rng import RngStream

RNG = np.random.default_rng(23)


@pytest.fixture(scope="module")
def mnist_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    datagen.write_mnist_layout(root, train_n=300, test_n=60, seed=0)
    return root


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar")
    datagen.write_cifar_layout(root, per_batch=40, test_n=40, seed=0)
    return root


def test_idx_image_roundtrip(tmp_path):
    imgs = RNG.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
    p = tmp_path / "imgs"
    datagen.write_idx_images(p, imgs)
    np.testing.assert_array_equal(read_idx_images(p), imgs)


def test_idx_label_roundtrip(tmp_path):
    labels = RNG.integers(0, 10, size=17).astype(np.uint8)
    p = tmp_path / "labels"
    datagen.write_idx_labels(p, labels)
    np.testing.assert_array_equal(read_idx_labels(p), labels)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">iiii", 0xDEAD, 1, 28, 28) + bytes(784))
    with pytest.raises(DatasetError, match="magic"):
        read_idx_images(p)


def test_idx_truncated_payload(tmp_path):
    p = tmp_path / "short"
    p.write_bytes(struct.pack(">iiii", 0x00000803, 2, 28, 28) + bytes(784))
    with pytest.raises(DatasetError, match="offset"):
        read_idx_images(p)


def test_idx_truncated_header(tmp_path):
    p = tmp_path / "tiny"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(DatasetError, match="truncated"):
        read_idx_images(p)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(struct.pack(">ii", 0x00000801, 2) + bytes([3, 11]))
    with pytest.raises(DatasetError, match="range"):
        read_idx_labels(p)


def test_load_mnist_splits_and_normalization(mnist_dir):
    ds = load_mnist(str(mnist_dir), val_size=50)
    assert ds.train_x.shape == (250, 1, 28, 28)
    assert ds.val_x.shape == (50, 1, 28, 28)
    assert ds.test_x.shape == (60, 1, 28, 28)
    assert ds.input_shape == (1, 28, 28)
    full = np.concatenate([ds.train_x, ds.val_x])
    assert abs(full.mean()) < 1e-9
    assert abs(full.std() - 1.0) < 1e-9
    assert ds.train_y.min() >= 0 and ds.train_y.max() <= 9


def test_load_mnist_env_var_fallback(mnist_dir, monkeypatch):
    monkeypatch.setenv("BLRNET_DATA_DIR", str(mnist_dir))
    ds = load_mnist(None, val_size=10)
    assert len(ds.val_x) == 10
    monkeypatch.delenv("BLRNET_DATA_DIR")
    with pytest.raises(DatasetError, match="BLRNET_DATA_DIR"):
        resolve_data_dir(None)


def test_load_cifar_shapes_and_channel_stats(cifar_dir):
    ds = load_cifar10(str(cifar_dir), val_size=40)
    assert ds.train_x.shape == (160, 3, 32, 32)
    assert ds.test_x.shape == (40, 3, 32, 32)
    full = np.concatenate([ds.train_x, ds.val_x])
    np.testing.assert_allclose(full.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    np.testing.assert_allclose(full.std(axis=(0, 2, 3)), 1.0, atol=1e-9)


def test_cifar_bad_record_size(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(bytes(3072))  # one byte short of a record
    for i in range(2, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(bytes(3073))
    (tmp_path / "test_batch.bin").write_bytes(bytes(3073))
    with pytest.raises(DatasetError, match="multiple"):
        load_cifar10(str(tmp_path))


def test_zca_whitens_covariance():
    # correlated 2-channel toy data: post-ZCA covariance ~ identity
    n, d = 2000, 16
    base = RNG.normal(size=(n, d))
    mix = RNG.normal(size=(d, d)) * 0.4 + np.eye(d)
    x = (base @ mix).reshape(n, 1, 4, 4)
    w = zca_fit(x, eps=1e-6)
    white = zca_apply(x - x.mean(axis=0), w).reshape(n, d)
    cov = white.T @ white / n
    np.testing.assert_allclose(cov, np.eye(d), atol=2e-3)


def test_zca_is_symmetric():
    x = RNG.normal(size=(500, 1, 3, 3))
    w = zca_fit(x)
    np.testing.assert_allclose(w, w.T, atol=1e-12)


def test_translate_identity():
    img = RNG.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(translate_flip(img, 0, 0, False), img)


def test_translate_double_flip_identity():
    img = RNG.normal(size=(1, 8, 8))
    once = translate_flip(img, 0, 0, True)
    np.testing.assert_array_equal(translate_flip(once, 0, 0, True), img)


def test_translate_shifts_with_zero_padding():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = translate_flip(img, 1, 0, False)  # shift down by one row
    np.testing.assert_array_equal(out[0, 0], 0.0)
    np.testing.assert_array_equal(out[0, 1:], img[0, :-1])


def test_translate_shift_bounds():
    img = np.ones((1, 6, 6))
    out = translate_flip(img, 4, -4, False)
    assert out.shape == img.shape
    assert out.sum() == 2 * 2  # only a 2x2 corner of ones survives


def test_augment_preserves_shape_and_values():
    x = RNG.normal(size=(10, 1, 12, 12))
    out = augment_batch(x, RngStream(3))
    assert out.shape == x.shape
    # every output pixel is either zero padding or a pixel from the source
    for a, b in zip(out, x):
        assert set(np.round(a.ravel(), 12)) <= set(
            np.round(np.concatenate([b.ravel(), [0.0]]), 12))


def test_augment_seeded_repeatable():
    x = RNG.normal(size=(4, 1, 10, 10))
    a = augment_batch(x, RngStream(7))
    b = augment_batch(x, RngStream(7))
    np.testing.assert_array_equal(a, b)


def test_generated_corpus_is_learnable_at_pixel_level():
    # distinct digits render with distinct pixel statistics: a trivial
    # nearest-mean classifier must beat chance by a wide margin
    images, labels = datagen.make_digit_dataset(600, seed=1)
    x = images.astype(float).reshape(600, -1)
    means = np.stack([x[labels == d].mean(axis=0) for d in range(10)])
    pred = np.argmin(
        ((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    assert (pred == labels).mean() > 0.5


def test_generated_corpus_covers_all_digits():
    _, labels = datagen.make_digit_dataset(500, seed=2)
    assert set(labels.tolist()) == set(range(10))
