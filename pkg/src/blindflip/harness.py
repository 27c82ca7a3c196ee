"""Experiment orchestration: victim training, evaluation, and the full
train -> quantize -> distill -> attack -> aggregate pipeline.

An experiment runs the pipeline once per seed and per attack mode, writes
per-seed artifacts into an output directory, and aggregates accuracy-vs-flips
series (mean/min/max across seeds) into aggregate.csv for the report stage.
All randomness flows from the config seeds; reruns produce identical bytes.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import tensor as T
from .attack import AttackConfig, run_attack, save_trace
from .data import Dataset, load_toy_dataset
from .distill import DistillConfig, distill, save_batch
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import ModelGraph, build_model, forward, save_model
from .quant import quantize_model
from .tensor import Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("lr/momentum/weight_decay out of range")
        return self


def train(model: ModelGraph, dataset: Dataset, cfg: TrainConfig):
    """SGD with momentum on cross-entropy; returns per-epoch loss/accuracy."""
    cfg.validate()
    images, labels = dataset.subset("train")
    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(p.data) for name, p in model.parameters()}
    metrics = []
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            lr *= cfg.lr_decay_factor
        order = rng.permutation(len(labels))
        epoch_loss = 0.0
        correct = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = Tensor(images[idx])
            y = labels[idx]
            model.zero_grad()
            try:
                logits = forward(model, x, mode="train")
                loss = T.softmax_cross_entropy(logits, y)
                value = loss.item()
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}") from None
            if not np.isfinite(value):
                raise DivergenceError(f"training diverged at epoch {epoch}")
            backward(loss)
            for name, p in model.parameters():
                g = p.grad if p.grad is not None else 0.0
                g = g + cfg.weight_decay * p.data
                v = velocity[name]
                v[:] = cfg.momentum * v + g
                p.data = p.data - np.float32(lr) * v
            epoch_loss += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        metrics.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / len(order),
                "train_accuracy": correct / len(order),
            }
        )
    return metrics


def evaluate(model: ModelGraph, dataset: Dataset, split: str = "test", batch_size: int = 256):
    """Top-1 accuracy and mean loss on a dataset split (eval mode)."""
    images, labels = dataset.subset(split)
    total_loss = 0.0
    correct = 0
    for lo in range(0, len(labels), batch_size):
        x = Tensor(images[lo : lo + batch_size])
        y = labels[lo : lo + batch_size]
        logits = forward(model, x, mode="eval")
        total_loss += T.softmax_cross_entropy(logits, y).item() * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(labels), total_loss / len(labels)


# ---------------------------------------------------------------------------
# experiment configuration

DEFAULT_CONFIG = {
    "experiment": {"seeds": [0, 1, 2, 3, 4], "modes": ["bdfa", "bfa"]},
    "dataset": {"name": "blobs4", "size": 2000, "seed": 0, "test_fraction": 0.25},
    "model": {"arch": "cnn2"},
    "train": {},
    "quantize": {"bits": 8},
    "distill": {},
    "attack": {},
}

KNOWN_MODES = ("bdfa", "bfa")


def load_experiment_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from None
    return merge_config(raw)


def merge_config(raw: dict) -> dict:
    config = {}
    for section, defaults in DEFAULT_CONFIG.items():
        value = dict(defaults)
        value.update(raw.get(section, {}))
        config[section] = value
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for mode in config["experiment"]["modes"]:
        if mode not in KNOWN_MODES:
            raise ConfigError(f"unknown attack mode {mode!r}; known: {list(KNOWN_MODES)}")
    if not config["experiment"]["seeds"]:
        raise ConfigError("experiment.seeds must be non-empty")
    return config


def _stage_configs(config: dict, seed: int):
    train_cfg = TrainConfig(**config["train"], seed=seed).validate()
    distill_cfg = DistillConfig(**config["distill"], seed=seed).validate()
    attack_cfg = AttackConfig(**config["attack"], seed=seed).validate()
    return train_cfg, distill_cfg, attack_cfg


def _draw_real_batch(dataset: Dataset, batch_size: int, seed: int):
    """Seeded draw of a real labeled batch (the data-dependent baseline)."""
    images, labels = dataset.subset("test")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(labels), size=min(batch_size, len(labels)), replace=False)
    return images[idx], labels[idx]


def run_seed(config: dict, dataset: Dataset, seed: int, out_dir: Path) -> dict:
    """Train, quantize, distill, and attack once; returns the seed summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg, distill_cfg, attack_cfg = _stage_configs(config, seed)

    model = build_model(
        config["model"]["arch"], dataset.input_shape, dataset.num_classes, seed=seed
    )
    train_metrics = train(model, dataset, train_cfg)
    float_acc, _ = evaluate(model, dataset, "test")
    save_model(model, out_dir / "model")

    qmodel = quantize_model(model, config["quantize"]["bits"])
    quant_acc, _ = evaluate(qmodel, dataset, "test")
    save_model(qmodel, out_dir / "qmodel")

    eval_set = dataset.subset("test")
    summary = {
        "seed": seed,
        "float_accuracy": float_acc,
        "quantized_accuracy": quant_acc,
        "train_metrics": train_metrics,
        "modes": {},
    }
    for mode in config["experiment"]["modes"]:
        if mode == "bdfa":
            batch = distill(qmodel, distill_cfg)
            save_batch(batch, out_dir / "distilled")
            x_data, labels = batch.images, batch.labels
        else:
            x_data, labels = _draw_real_batch(dataset, distill_cfg.batch_size, seed)
        victim = qmodel.clone()
        trace = run_attack(victim, x_data, labels, attack_cfg, eval_set=eval_set)
        trace.mode = mode
        trace.meta = {"arch": config["model"]["arch"], "dataset": dataset.name, "seed": seed}
        save_trace(trace, out_dir / f"trace_{mode}")
        summary["modes"][mode] = {
            "flips": trace.num_flips,
            "stalled": trace.stalled,
            "final_accuracy": trace.accuracies[-1] if trace.records else trace.clean_accuracy,
            "final_loss": trace.losses[-1] if trace.records else trace.clean_loss,
        }
    return summary


def accuracy_series(trace_doc: dict, max_flips: int):
    """Accuracy at flips 0..max_flips, carrying the last value past early stops."""
    series = [trace_doc["clean_accuracy"]]
    for rec in trace_doc["records"]:
        series.append(rec["accuracy_after"])
    while len(series) < max_flips + 1:
        series.append(series[-1])
    return series[: max_flips + 1]


def aggregate_traces(out_dir: Path, modes, seeds, max_flips: int):
    """Write aggregate.csv: per (mode, flip) mean/min/max accuracy across seeds."""
    rows = []
    for mode in modes:
        table = []
        for seed in seeds:
            doc = json.loads((out_dir / f"seed_{seed}" / f"trace_{mode}" / "trace.json").read_text())
            table.append(accuracy_series(doc, max_flips))
        arr = np.array(table, dtype=np.float64)
        for flip in range(max_flips + 1):
            col = arr[:, flip]
            rows.append((mode, flip, float(col.mean()), float(col.min()), float(col.max())))
    with open(out_dir / "aggregate.csv", "w") as fh:
        fh.write("mode,flip,mean_accuracy,min_accuracy,max_accuracy\n")
        for mode, flip, mean, lo, hi in rows:
            fh.write(f"{mode},{flip},{mean!r},{lo!r},{hi!r}\n")
    return rows


def run_experiment(config: dict, out_dir) -> Path:
    """Execute the full pipeline for every seed; failures of one seed do not
    stop the rest. Writes per-seed directories, aggregate.csv, report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = merge_config(config)

    ds_cfg = config["dataset"]
    dataset = load_toy_dataset(
        ds_cfg["name"], ds_cfg["size"], seed=ds_cfg["seed"], test_fraction=ds_cfg["test_fraction"]
    )

    seeds = list(config["experiment"]["seeds"])
    modes = list(config["experiment"]["modes"])
    report = {"config": config, "dataset": dataset.name, "seeds": {}, "errors": {}}
    completed = []
    for seed in seeds:
        try:
            summary = run_seed(config, dataset, seed, out_dir / f"seed_{seed}")
            report["seeds"][str(seed)] = summary
            completed.append(seed)
        except Exception as e:  # noqa: BLE001 - stage failures are recorded, run continues
            report["errors"][str(seed)] = f"{type(e).__name__}: {e}"

    if completed:
        attack_cfg = AttackConfig(**config["attack"]).validate()
        aggregate_traces(out_dir, modes, completed, attack_cfg.max_flips)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return out_dir
