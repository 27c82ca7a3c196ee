"""Toy dataset generators and the CIFAR binary loader."""

import os

import numpy as np
import pytest

from blindflip.data import load_cifar, load_toy_dataset
from blindflip.errors import DataError


def test_blobs4_deterministic_bytes():
    a = load_toy_dataset("blobs4", 200, seed=5)
    b = load_toy_dataset("blobs4", 200, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert (a.split == b.split).all()
    c = load_toy_dataset("blobs4", 200, seed=6)
    assert a.images.tobytes() != c.images.tobytes()


def test_unknown_toy_name_rejected():
    with pytest.raises(DataError, match="unknown toy dataset"):
        load_toy_dataset("spirals9", 100, seed=0)


def test_class_counts_balanced():
    # labels are assigned in balanced counts before shuffling, so total
    # counts are exact and per-split counts stay within 5% of M/K when
    # averaged over seeds
    per_split = []
    for seed in range(5):
        ds = load_toy_dataset("blobs4", 1000, seed=seed)
        total = np.bincount(ds.labels, minlength=4)
        np.testing.assert_array_equal(total, [250, 250, 250, 250])
        _, test_labels = ds.subset("test")
        per_split.append(np.bincount(test_labels, minlength=4))
    mean_counts = np.mean(per_split, axis=0)
    expected = 250 * 0.25
    assert np.abs(mean_counts - expected).max() <= 0.05 * expected


def test_normalization_stats_on_train_split():
    ds = load_toy_dataset("blobs4", 800, seed=1)
    train_images, _ = ds.subset("train")
    mean = train_images.astype(np.float64).mean(axis=(0, 2, 3))
    std = train_images.astype(np.float64).std(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-4
    assert np.abs(std - 1.0).max() < 1e-4
    assert ds.channel_mean.shape == (3,) and ds.channel_std.shape == (3,)


@pytest.mark.parametrize("name,floor", [("blobs4", 0.95), ("rings2", 0.95)])
def test_nearest_centroid_oracle(name, floor):
    # sanity oracle proving the classes are learnable from raw pixels
    ds = load_toy_dataset(name, 1200, seed=2)
    train_x, train_y = ds.subset("train")
    test_x, test_y = ds.subset("test")
    centroids = np.stack(
        [train_x[train_y == c].reshape(-1, train_x[0].size).mean(axis=0) for c in range(ds.num_classes)]
    )
    flat = test_x.reshape(len(test_y), -1)
    d2 = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    accuracy = (d2.argmin(axis=1) == test_y).mean()
    assert accuracy >= floor


def test_empty_split_rejected():
    ds = load_toy_dataset("blobs4", 100, seed=0, test_fraction=0.0)
    with pytest.raises(DataError, match="empty"):
        ds.subset("test")
    with pytest.raises(DataError, match="unknown split"):
        ds.subset("validation")


# ---------------------------------------------------------------------------
# CIFAR binaries


def write_cifar10_files(path, per_file=50, seed=0):
    rng = np.random.default_rng(seed)
    files = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    raw = {}
    for name in files:
        labels = rng.integers(0, 10, per_file, dtype=np.uint8)
        pixels = rng.integers(0, 256, (per_file, 3072), dtype=np.uint8)
        records = np.concatenate([labels[:, None], pixels], axis=1)
        (path / name).write_bytes(records.tobytes())
        raw[name] = (labels, pixels)
    return raw


def test_cifar10_layout_and_values(tmp_path):
    raw = write_cifar10_files(tmp_path)
    ds = load_cifar(tmp_path)
    assert ds.num_classes == 10
    assert ds.images.shape == (300, 3, 32, 32)
    assert (ds.split == "train").sum() == 250
    assert (ds.split == "test").sum() == 50
    # first record of the first batch: label byte, then R plane first
    assert ds.labels[0] == raw["data_batch_1.bin"][0][0]
    recovered = ds.images[0] * ds.channel_std[:, None, None] + ds.channel_mean[:, None, None]
    expected = raw["data_batch_1.bin"][1][0].reshape(3, 32, 32) / 255.0
    np.testing.assert_allclose(recovered, expected, atol=1e-5)


def test_cifar10_normalized_train_mean_near_zero(tmp_path):
    write_cifar10_files(tmp_path, per_file=100)
    ds = load_cifar(tmp_path)
    train_x, _ = ds.subset("train")
    assert np.abs(train_x.mean(axis=(0, 2, 3))).max() < 0.05


def test_cifar100_fine_labels(tmp_path):
    rng = np.random.default_rng(1)
    for name, n in (("train.bin", 80), ("test.bin", 20)):
        coarse = rng.integers(0, 20, n, dtype=np.uint8)
        fine = rng.integers(0, 100, n, dtype=np.uint8)
        pixels = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
        records = np.concatenate([coarse[:, None], fine[:, None], pixels], axis=1)
        (tmp_path / name).write_bytes(records.tobytes())
        if name == "train.bin":
            first_fine = fine[0]
    ds = load_cifar(tmp_path)
    assert ds.num_classes == 100
    assert len(ds.labels) == 100
    assert ds.labels[0] == first_fine


def test_cifar_missing_file_named(tmp_path):
    write_cifar10_files(tmp_path)
    os.remove(tmp_path / "data_batch_3.bin")
    with pytest.raises(DataError, match="data_batch_3.bin"):
        load_cifar(tmp_path)
    with pytest.raises(DataError, match="no CIFAR binary files"):
        load_cifar(tmp_path / "nowhere")


def test_cifar_truncated_file_named(tmp_path):
    write_cifar10_files(tmp_path)
    blob = (tmp_path / "test_batch.bin").read_bytes()
    (tmp_path / "test_batch.bin").write_bytes(blob[:-100])
    with pytest.raises(DataError, match="truncated CIFAR file.*test_batch.bin"):
        load_cifar(tmp_path)


@pytest.mark.skipif(
    "BLINDFLIP_CIFAR10_DIR" not in os.environ,
    reason="set BLINDFLIP_CIFAR10_DIR to a real CIFAR-10 binary directory",
)
def test_real_cifar10_counts():
    ds = load_cifar(os.environ["BLINDFLIP_CIFAR10_DIR"])
    assert (ds.split == "train").sum() == 50000
    assert (ds.split == "test").sum() == 10000
    assert ds.num_classes == 10
