"""Synthetic digit corpus writer (MNIST IDX and CIFAR-10 binary formats).

This environment ships no benchmark datasets and has no general network
access, so desk-scale experiments run on procedurally rendered digits:
Hershey-font glyphs with random font, scale, stroke width, rotation,
translation, and pixel noise, emitted in the exact on-disk formats the
loaders parse. Usage:

    python -m blrnet.datagen --out data/digits --train 12000 --test 2000
"""

from __future__ import annotations

import argparse
import struct
from pathlib import Path

import cv2
import numpy as np

FONTS = [
    cv2.FONT_HERSHEY_SIMPLEX,
    cv2.FONT_HERSHEY_DUPLEX,
    cv2.FONT_HERSHEY_COMPLEX,
    cv2.FONT_HERSHEY_TRIPLEX,
    cv2.FONT_HERSHEY_SCRIPT_SIMPLEX,
    cv2.FONT_HERSHEY_PLAIN,
]


def render_digit(digit: int, rng: np.random.Generator,
                 size: int = 28) -> np.ndarray:
    """One noisy grayscale glyph of `digit`, uint8 (size, size)."""
    canvas = np.zeros((64, 64), dtype=np.uint8)
    font = FONTS[rng.integers(len(FONTS))]
    scale = 1.2 + rng.random() * 0.9
    thickness = int(rng.integers(1, 4))
    text = str(digit)
    (tw, th), _ = cv2.getTextSize(text, font, scale, thickness)
    org = (32 - tw // 2 + int(rng.integers(-3, 4)),
           32 + th // 2 + int(rng.integers(-3, 4)))
    cv2.putText(canvas, text, org, font, scale, 255, thickness, cv2.LINE_AA)
    angle = float(rng.normal(0, 6))
    rot = cv2.getRotationMatrix2D((32, 32), angle, 1.0)
    canvas = cv2.warpAffine(canvas, rot, (64, 64))
    img = cv2.resize(canvas[10:54, 10:54], (size, size),
                     interpolation=cv2.INTER_AREA)
    noise = rng.normal(0, 8, img.shape)
    return np.clip(img.astype(np.float64) + noise, 0, 255).astype(np.uint8)


def make_digit_dataset(n: int, seed: int, size: int = 28):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.stack([render_digit(int(d), rng, size) for d in labels])
    return images, labels


def write_idx_images(path: Path, images: np.ndarray):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def write_mnist_layout(out_dir: Path, train_n: int, test_n: int, seed: int):
    """Write train/test IDX files with synthetic digits into `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tx, ty = make_digit_dataset(train_n, seed)
    ex, ey = make_digit_dataset(test_n, seed + 1)
    write_idx_images(out_dir / "train-images-idx3-ubyte", tx)
    write_idx_labels(out_dir / "train-labels-idx1-ubyte", ty)
    write_idx_images(out_dir / "t10k-images-idx3-ubyte", ex)
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte", ey)


def write_cifar_layout(out_dir: Path, per_batch: int, test_n: int, seed: int):
    """Write CIFAR-10-format binary batches with synthetic color digits."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def one_file(path, n, rseed):
        images, labels = make_digit_dataset(n, rseed, size=32)
        tint = rng.random((n, 3, 1, 1)) * 0.5 + 0.5
        color = (images[:, None, :, :] * tint).astype(np.uint8)
        recs = np.concatenate(
            [labels[:, None], color.reshape(n, -1)], axis=1).astype(np.uint8)
        path.write_bytes(recs.tobytes())

    for i in range(1, 6):
        one_file(out_dir / f"data_batch_{i}.bin", per_batch, seed + i)
    one_file(out_dir / "test_batch.bin", test_n, seed + 99)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--format", choices=["mnist", "cifar"], default="mnist")
    ap.add_argument("--train", type=int, default=12000)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if args.format == "mnist":
        write_mnist_layout(args.out, args.train, args.test, args.seed)
    else:
        write_cifar_layout(args.out, args.train // 5, args.test, args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
