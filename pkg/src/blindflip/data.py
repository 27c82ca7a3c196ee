"""Datasets: procedurally generated desk-scale image classes and a CIFAR loader.

The toy generators stand in for CIFAR during attack experiments: small RGB
canvases whose class is determined by geometry (blob position, ring radius),
learnable by a tiny CNN in a few epochs. Labels are assigned in balanced
counts and the sample order is a seeded permutation, so class frequencies are
deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

TOY_IMAGE_SIZE = 16


@dataclass
class Dataset:
    """Normalized image classification data with train/test split tags."""

    name: str
    images: np.ndarray  # (M, C, H, W) float32, already normalized
    labels: np.ndarray  # (M,) int64 in [0, K)
    split: np.ndarray  # (M,) strings, "train" or "test"
    num_classes: int
    channel_mean: np.ndarray  # normalization stats, per channel
    channel_std: np.ndarray

    def subset(self, tag: str):
        if tag not in ("train", "test"):
            raise DataError(f"unknown split tag {tag!r}")
        idx = np.nonzero(self.split == tag)[0]
        if idx.size == 0:
            raise DataError(f"split {tag!r} is empty")
        return self.images[idx], self.labels[idx]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])


def _balanced_labels(m, k, rng):
    labels = np.tile(np.arange(k, dtype=np.int64), (m + k - 1) // k)[:m]
    return labels[rng.permutation(m)]


def _render_blobs4(m, size, rng):
    """Gaussian bump in one of the four quadrants; class = quadrant."""
    qs = size // 4
    centers = np.array(
        [[qs, qs], [qs, 3 * qs], [3 * qs, qs], [3 * qs, 3 * qs]], dtype=np.float64
    )
    labels = _balanced_labels(m, 4, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((m, 3, size, size), dtype=np.float32)
    for i in range(m):
        cy, cx = centers[labels[i]] + rng.uniform(-1.5, 1.5, 2)
        sigma = rng.uniform(1.3, 2.1)
        amp = rng.uniform(0.8, 1.2)
        color = rng.uniform(0.5, 1.0, 3)
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
        noise = rng.normal(0.0, 0.1, (3, size, size))
        images[i] = (color[:, None, None] * bump[None] + noise).astype(np.float32)
    return images, labels


def _render_rings2(m, size, rng):
    """Bright ring around the canvas center; class = ring radius (small/large)."""
    radii = (size * 0.17, size * 0.36)
    labels = _balanced_labels(m, 2, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    images = np.empty((m, 3, size, size), dtype=np.float32)
    for i in range(m):
        r = radii[labels[i]] + rng.uniform(-0.6, 0.6)
        width = rng.uniform(0.8, 1.3)
        amp = rng.uniform(0.8, 1.2)
        color = rng.uniform(0.5, 1.0, 3)
        ring = amp * np.exp(-((dist - r) ** 2) / (2.0 * width**2))
        noise = rng.normal(0.0, 0.1, (3, size, size))
        images[i] = (color[:, None, None] * ring[None] + noise).astype(np.float32)
    return images, labels


_TOY_GENERATORS = {"blobs4": (_render_blobs4, 4), "rings2": (_render_rings2, 2)}


def load_toy_dataset(
    name: str, m: int = 2000, seed: int = 0, size: int = TOY_IMAGE_SIZE, test_fraction: float = 0.25
) -> Dataset:
    """Generate a deterministic toy dataset; normalization uses train-split stats."""
    if name not in _TOY_GENERATORS:
        raise DataError(f"unknown toy dataset {name!r}; known: {sorted(_TOY_GENERATORS)}")
    if m < 8:
        raise DataError(f"dataset size {m} too small")
    render, k = _TOY_GENERATORS[name]
    rng = np.random.default_rng(seed)
    images, labels = render(m, size, rng)

    n_train = int(round(m * (1.0 - test_fraction)))
    split = np.array(["train"] * n_train + ["test"] * (m - n_train))

    train = images[:n_train].astype(np.float64)
    mean = train.mean(axis=(0, 2, 3))
    std = train.std(axis=(0, 2, 3))
    images = ((images - mean[None, :, None, None].astype(np.float32))
              / std[None, :, None, None].astype(np.float32))
    return Dataset(
        name=name,
        images=images.astype(np.float32),
        labels=labels,
        split=split,
        num_classes=k,
        channel_mean=mean,
        channel_std=std,
    )


# ---------------------------------------------------------------------------
# CIFAR binary format
#
# CIFAR-10 binary: data_batch_{1..5}.bin and test_batch.bin, records of
# 1 label byte + 3072 pixel bytes (R, G, B planes of a 32x32 image).
# CIFAR-100 binary: train.bin and test.bin, records of 2 label bytes
# (coarse, fine) + 3072 pixel bytes; the fine label is used.

CIFAR_IMAGE_BYTES = 3072


def _read_cifar_file(path: Path, label_bytes: int):
    if not path.exists():
        raise DataError(f"missing CIFAR file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    record = label_bytes + CIFAR_IMAGE_BYTES
    if raw.size == 0 or raw.size % record != 0:
        raise DataError(f"truncated CIFAR file: {path} ({raw.size} bytes, record size {record})")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)  # fine label is last
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar(path) -> Dataset:
    """Load CIFAR-10 or CIFAR-100 binary files from a directory."""
    path = Path(path)
    if (path / "data_batch_1.bin").exists():
        variant, k, label_bytes = "cifar10", 10, 1
        train_files = [path / f"data_batch_{i}.bin" for i in range(1, 6)]
        test_files = [path / "test_batch.bin"]
    elif (path / "train.bin").exists():
        variant, k, label_bytes = "cifar100", 100, 2
        train_files = [path / "train.bin"]
        test_files = [path / "test.bin"]
    else:
        raise DataError(f"no CIFAR binary files found under {path}")

    train_parts = [_read_cifar_file(f, label_bytes) for f in train_files]
    test_parts = [_read_cifar_file(f, label_bytes) for f in test_files]
    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x = np.concatenate([p[0] for p in test_parts])
    test_y = np.concatenate([p[1] for p in test_parts])

    scaled = train_x.astype(np.float32) / 255.0
    mean = scaled.mean(axis=(0, 2, 3), dtype=np.float64)
    std = scaled.std(axis=(0, 2, 3), dtype=np.float64)

    images = np.concatenate([train_x, test_x]).astype(np.float32) / 255.0
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    labels = np.concatenate([train_y, test_y])
    split = np.array(["train"] * len(train_y) + ["test"] * len(test_y))
    if labels.max() >= k:
        raise DataError(f"label {labels.max()} out of range for {variant}")
    return Dataset(
        name=variant,
        images=images.astype(np.float32),
        labels=labels,
        split=split,
        num_classes=k,
        channel_mean=mean,
        channel_std=std,
    )
