"""Synthetic attack-batch generation from BN running statistics alone.

Starting from a random normal batch with fixed random labels, the inputs are
optimized so that (a) the per-channel statistics each BN layer sees match the
running statistics it accumulated during training, and (b) the network's
cross-entropy against the assigned labels shrinks. Model parameters and
running statistics are never modified; only the batch moves.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    ChecksumError,
    ConfigError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    ShapeError,
    StateError,
)
from .model import ModelGraph, forward, running_bn_stats
from .tensor import Tensor

BATCH_MAGIC = "BLINDFLIP-BATCH"
BATCH_FORMAT_VERSION = 1


@dataclass
class DistillConfig:
    batch_size: int = 128
    iterations: int = 500
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 0.01
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.alpha + self.beta <= 0:
            raise ConfigError("alpha + beta must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self


@dataclass
class DistilledBatch:
    """Synthetic inputs with their fixed random labels and loss history."""

    images: np.ndarray  # (N, C, H, W) float32, per-sample mean 0 / var 1
    labels: np.ndarray  # (N,) int64
    final_bn_loss: float
    final_dnn_loss: float
    history: list = field(default_factory=list)  # dicts: iteration, bn_loss, dnn_loss, total
    seed: int = 0
    config: dict = field(default_factory=dict)


def project_samples(x: np.ndarray) -> np.ndarray:
    """Normalize each sample to mean 0 / population variance 1 (float64 math)."""
    x64 = x.astype(np.float64)
    flat = x64.reshape(x64.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    if (std < 1e-12).any():
        raise DivergenceError("projection: sample collapsed to a constant")
    flat = (flat - mean) / std
    return flat.reshape(x64.shape).astype(x.dtype)


def init_batch(shape, num_classes: int, seed: int):
    """Random normal batch projected to per-sample mean 0 / var 1, plus labels.

    ``shape`` is the full batch shape (N, ...). Labels are drawn uniformly
    over [0, num_classes) and stay fixed for the life of the batch.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or any(s < 1 for s in shape):
        raise ShapeError(f"init_batch: bad batch shape {shape}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    x = project_samples(x)
    labels = rng.integers(0, num_classes, shape[0]).astype(np.int64)
    return x, labels


def bn_loss(batch_stats, reference_stats):
    """Sum over BN layers of squared L2 distances between (mean, std) pairs.

    ``batch_stats`` entries may be Tensors (differentiable path) or arrays;
    ``reference_stats`` entries are arrays. Lists must align layer by layer.
    """
    if len(batch_stats) != len(reference_stats):
        raise ShapeError(
            f"bn_loss: {len(batch_stats)} batch stat layers vs {len(reference_stats)} reference"
        )
    on_tape = any(isinstance(mu, Tensor) for mu, _ in batch_stats)
    total = None
    for i, ((mu, sigma), (ref_mu, ref_sigma)) in enumerate(zip(batch_stats, reference_stats)):
        mu_shape = tuple(mu.shape)
        if mu_shape != tuple(np.shape(ref_mu)):
            raise ShapeError(
                f"bn_loss: layer {i} channel counts differ, {mu_shape} vs {np.shape(ref_mu)}"
            )
        if on_tape:
            dmu = T.sub(mu, Tensor(np.asarray(ref_mu, dtype=np.float32)))
            dsig = T.sub(sigma, Tensor(np.asarray(ref_sigma, dtype=np.float32)))
            term = T.add(T.tsum(T.mul(dmu, dmu)), T.tsum(T.mul(dsig, dsig)))
            total = term if total is None else T.add(total, term)
        else:
            dmu = np.asarray(mu, dtype=np.float64) - np.asarray(ref_mu, dtype=np.float64)
            dsig = np.asarray(sigma, dtype=np.float64) - np.asarray(ref_sigma, dtype=np.float64)
            term = float((dmu * dmu).sum() + (dsig * dsig).sum())
            total = term if total is None else total + term
    return total


def dnn_loss(logits, labels):
    """Mean cross-entropy of the batch against its fixed random labels."""
    return T.softmax_cross_entropy(logits, labels)


def _losses(model, x_data, labels, reference):
    xt = Tensor(x_data, requires_grad=True)
    logits, stats = forward(model, xt, mode="train", update_running=False, capture=True)
    return xt, bn_loss(stats, reference), dnn_loss(logits, labels)


def distill(model: ModelGraph, cfg: DistillConfig) -> DistilledBatch:
    """Run the synthetic-data generation loop against a trained model.

    Each iteration: forward on the batch-statistics path (running stats
    untouched), combined loss alpha * bn + beta * dnn, backward w.r.t. the
    inputs only, Adam step, re-projection of every sample to mean 0 / var 1.
    """
    cfg.validate()
    if not model.bn_layers():
        raise StateError("BN statistics unavailable: model has no BN layers")
    reference = [
        (mu.astype(np.float32), sigma.astype(np.float32)) for mu, sigma in running_bn_stats(model)
    ]

    x_data, labels = init_batch((cfg.batch_size,) + model.input_shape, model.num_classes, cfg.seed)

    grad_flags = [p.requires_grad for _, p in model.parameters()]
    model.set_requires_grad(False)
    m = np.zeros_like(x_data)
    v = np.zeros_like(x_data)
    history = []
    try:
        for it in range(cfg.iterations):
            try:
                xt, bn_t, ce_t = _losses(model, x_data, labels, reference)
                total = T.add(T.mul(bn_t, cfg.alpha), T.mul(ce_t, cfg.beta))
                total_val = total.item()
            except NonFiniteError as e:
                raise DivergenceError(f"distillation diverged at iteration {it}: {e}") from None
            if not np.isfinite(total_val):
                raise DivergenceError(f"distillation diverged at iteration {it}")
            history.append(
                {"iteration": it, "bn_loss": bn_t.item(), "dnn_loss": ce_t.item(), "total": total_val}
            )
            T.backward(total)
            g = xt.grad
            t = it + 1
            m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * (g * g)
            mhat = m / (1.0 - cfg.adam_beta1**t)
            vhat = v / (1.0 - cfg.adam_beta2**t)
            x_data = x_data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            x_data = project_samples(x_data.astype(np.float32))

        _, bn_t, ce_t = _losses(model, x_data, labels, reference)
        final_bn, final_ce = bn_t.item(), ce_t.item()
    finally:
        for (_, p), flag in zip(model.parameters(), grad_flags):
            p.requires_grad = flag

    return DistilledBatch(
        images=x_data,
        labels=labels,
        final_bn_loss=final_bn,
        final_dnn_loss=final_ce,
        history=history,
        seed=cfg.seed,
        config=asdict(cfg),
    )


# ---------------------------------------------------------------------------
# on-disk format: manifest + raw little-endian blobs + loss history CSV

def save_batch(batch: DistilledBatch, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    x_raw = np.ascontiguousarray(batch.images.astype("<f4")).tobytes()
    y_raw = np.ascontiguousarray(batch.labels.astype("<i4")).tobytes()
    manifest = {
        "magic": BATCH_MAGIC,
        "format_version": BATCH_FORMAT_VERSION,
        "batch_size": int(batch.images.shape[0]),
        "shape": list(batch.images.shape[1:]),
        "num_classes": int(batch.labels.max()) + 1 if batch.labels.size else 0,
        "seed": batch.seed,
        "config": batch.config,
        "final_bn_loss": batch.final_bn_loss,
        "final_dnn_loss": batch.final_dnn_loss,
        "x_crc32": zlib.crc32(x_raw),
        "labels_crc32": zlib.crc32(y_raw),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "x.bin").write_bytes(x_raw)
    (path / "labels.bin").write_bytes(y_raw)
    with open(path / "history.csv", "w") as fh:
        fh.write("iteration,bn_loss,dnn_loss,total\n")
        for row in batch.history:
            fh.write(f"{row['iteration']},{row['bn_loss']!r},{row['dnn_loss']!r},{row['total']!r}\n")


def load_batch(path) -> DistilledBatch:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"format error: missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"format error: manifest is not valid JSON ({e})") from None
    if manifest.get("magic") != BATCH_MAGIC:
        raise FormatError(f"format error: bad manifest magic {manifest.get('magic')!r}")
    x_raw = (path / "x.bin").read_bytes()
    y_raw = (path / "labels.bin").read_bytes()
    if zlib.crc32(x_raw) != manifest["x_crc32"] or zlib.crc32(y_raw) != manifest["labels_crc32"]:
        raise ChecksumError(f"checksum failure in distilled batch {path}")
    shape = (manifest["batch_size"], *manifest["shape"])
    images = np.frombuffer(x_raw, dtype="<f4").reshape(shape).copy()
    labels = np.frombuffer(y_raw, dtype="<i4").astype(np.int64)
    history = []
    hist_path = path / "history.csv"
    if hist_path.exists():
        lines = hist_path.read_text().strip().splitlines()[1:]
        for line in lines:
            it, bn_v, ce_v, tot = line.split(",")
            history.append(
                {"iteration": int(it), "bn_loss": float(bn_v), "dnn_loss": float(ce_v), "total": float(tot)}
            )
    return DistilledBatch(
        images=images,
        labels=labels,
        final_bn_loss=manifest["final_bn_loss"],
        final_dnn_loss=manifest["final_dnn_loss"],
        history=history,
        seed=manifest["seed"],
        config=manifest.get("config", {}),
    )
