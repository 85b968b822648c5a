"""Dataset loading and preprocessing: MNIST IDX, CIFAR-10 binary, augmentation.

Datasets are read from a directory given explicitly or via the
BLRNET_DATA_DIR environment variable; nothing is ever downloaded.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class DatasetError(ValueError):
    """Malformed or missing dataset file."""


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])  # type: ignore[return-value]


def resolve_data_dir(path: str | None) -> Path:
    if path:
        return Path(path)
    env = os.environ.get("BLRNET_DATA_DIR")
    if not env:
        raise DatasetError("no dataset path given and BLRNET_DATA_DIR unset")
    return Path(env)


def read_idx_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DatasetError(f"{path}: truncated header at offset {len(raw)}")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic:#010x} at offset 0")
    expect = 16 + count * rows * cols
    if len(raw) != expect:
        raise DatasetError(f"{path}: expected {expect} bytes, file ends at "
                           f"offset {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header at offset {len(raw)}")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic:#010x} at offset 0")
    if len(raw) != 8 + count:
        raise DatasetError(f"{path}: expected {8 + count} bytes, file ends at "
                           f"offset {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.max(initial=0) > 9:
        raise DatasetError(f"{path}: label out of range [0, 9]")
    return labels.astype(np.int64)


def load_mnist(path: str | None = None, val_size: int = 5000) -> Dataset:
    """Load MNIST-format IDX files, globally standardized on training pixels.

    `path` must contain train-images-idx3-ubyte, train-labels-idx1-ubyte,
    t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte. The last `val_size`
    training images become the validation split.
    """
    root = resolve_data_dir(path)
    tx = read_idx_images(root / "train-images-idx3-ubyte").astype(np.float64)
    ty = read_idx_labels(root / "train-labels-idx1-ubyte")
    ex = read_idx_images(root / "t10k-images-idx3-ubyte").astype(np.float64)
    ey = read_idx_labels(root / "t10k-labels-idx1-ubyte")
    if len(tx) != len(ty) or len(ex) != len(ey):
        raise DatasetError("image/label counts disagree")
    mean = tx.mean()
    std = tx.std()
    tx = ((tx - mean) / std)[:, None, :, :]
    ex = ((ex - mean) / std)[:, None, :, :]
    if not 0 <= val_size < len(tx):
        raise DatasetError(f"validation size {val_size} out of range")
    cut = len(tx) - val_size
    return Dataset(tx[:cut], ty[:cut], tx[cut:], ty[cut:], ex, ey)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of "
                           f"{CIFAR_RECORD_BYTES}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DatasetError(f"{path}: label out of range [0, 9]")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return images, labels


def zca_fit(x: np.ndarray, eps: float = 1e-2) -> np.ndarray:
    """Whitening matrix U (L + eps I)^(-1/2) U^T of the flattened covariance."""
    flat = x.reshape(len(x), -1)
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / len(flat)
    vals, vecs = np.linalg.eigh(cov)
    return vecs @ np.diag(1.0 / np.sqrt(vals + eps)) @ vecs.T


def zca_apply(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    flat = x.reshape(len(x), -1)
    return (flat @ w.T).reshape(x.shape)


def load_cifar10(path: str | None = None, zca: bool = False,
                 zca_eps: float = 1e-2, val_size: int = 5000) -> Dataset:
    """Load CIFAR-10 binary batches, channel-standardized on training data.

    If `zca` is set, a whitening transform fitted on the training images is
    applied to every split. The last `val_size` training images become the
    validation split.
    """
    root = resolve_data_dir(path)
    parts = [_read_cifar_file(root / f"data_batch_{i}.bin") for i in range(1, 6)]
    tx = np.concatenate([p[0] for p in parts])
    ty = np.concatenate([p[1] for p in parts])
    ex, ey = _read_cifar_file(root / "test_batch.bin")
    mean = tx.mean(axis=(0, 2, 3), keepdims=True)
    std = tx.std(axis=(0, 2, 3), keepdims=True)
    tx = (tx - mean) / std
    ex = (ex - mean) / std
    if zca:
        w = zca_fit(tx, eps=zca_eps)
        tx = zca_apply(tx, w)
        ex = zca_apply(ex, w)
    cut = len(tx) - val_size
    return Dataset(tx[:cut], ty[:cut], tx[cut:], ty[cut:], ex, ey)


def sample_augmentation(rng: RngStream, max_shift: int = 4):
    """(dy, dx, flip) for one image: uniform integer shifts, fair coin flip."""
    dy = int(rng.integers(-max_shift, max_shift + 1))
    dx = int(rng.integers(-max_shift, max_shift + 1))
    flip = bool(rng.uniform(()) < 0.5)
    return dy, dx, flip


def translate_flip(img: np.ndarray, dy: int, dx: int, flip: bool,
                   max_shift: int = 4) -> np.ndarray:
    """Shift with zero padding and optionally flip horizontally (CHW)."""
    c, h, w = img.shape
    p = max_shift
    padded = np.pad(img, ((0, 0), (p, p), (p, p)))
    out = padded[:, p - dy:p - dy + h, p - dx:p - dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(record: np.ndarray, rng: RngStream, max_shift: int = 4) -> np.ndarray:
    """Random translation in [-max_shift, max_shift] plus random h-flip."""
    dy, dx, flip = sample_augmentation(rng, max_shift)
    return translate_flip(record, dy, dx, flip, max_shift)


def augment_batch(x: np.ndarray, rng: RngStream, max_shift: int = 4) -> np.ndarray:
    return np.stack([augment(img, rng, max_shift) for img in x])
