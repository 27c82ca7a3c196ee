"""Command-line driver: train, quantize, distill, attack, evaluate, experiment, report.

Every subcommand honors --seed, --out, and --config uniformly; a config file
supplies defaults (same TOML schema as experiments) and explicit flags win.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Errors
print one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, run_attack, save_trace
from .data import load_cifar, load_toy_dataset
from .distill import DistillConfig, distill, load_batch, save_batch
from .errors import BlindflipError, ConfigError
from .harness import (
    TrainConfig,
    evaluate,
    load_experiment_config,
    merge_config,
    run_experiment,
    train,
)
from .model import ARCHITECTURES, build_model, load_model, save_model
from .quant import quantize_model
from .report import report


def _base_config(args) -> dict:
    if getattr(args, "config", None):
        return load_experiment_config(args.config)
    return merge_config({})


def _pick(flag, config_value):
    return config_value if flag is None else flag


def _load_dataset(args, config):
    ds = config["dataset"]
    name = _pick(args.dataset, ds["name"])
    if name == "cifar":
        if not args.data_path:
            raise ConfigError("--data-path is required for the cifar dataset")
        return load_cifar(args.data_path)
    return load_toy_dataset(
        name,
        _pick(args.dataset_size, ds["size"]),
        seed=_pick(args.dataset_seed, ds["seed"]),
        test_fraction=ds["test_fraction"],
    )


def _add_dataset_flags(p, required=False):
    p.add_argument("--dataset", default=None, help="blobs4, rings2, or cifar")
    p.add_argument("--dataset-size", type=int, default=None, help="toy dataset sample count")
    p.add_argument("--dataset-seed", type=int, default=None, help="toy dataset generator seed")
    p.add_argument("--data-path", default=None, help="directory with CIFAR binary files")


def _add_common(p, out_required=True):
    p.add_argument("--config", default=None, help="TOML config supplying defaults")
    p.add_argument("--seed", type=int, default=None, help="stage seed")
    p.add_argument("--out", required=out_required, help="output directory")


def cmd_train(args):
    config = _base_config(args)
    dataset = _load_dataset(args, config)
    seed = _pick(args.seed, 0)
    tc = config["train"]
    cfg = TrainConfig(
        epochs=_pick(args.epochs, tc.get("epochs", TrainConfig.epochs)),
        batch_size=_pick(args.batch_size, tc.get("batch_size", TrainConfig.batch_size)),
        lr=_pick(args.lr, tc.get("lr", TrainConfig.lr)),
        momentum=tc.get("momentum", TrainConfig.momentum),
        weight_decay=tc.get("weight_decay", TrainConfig.weight_decay),
        seed=seed,
    ).validate()
    arch = _pick(args.arch, config["model"]["arch"])
    model = build_model(arch, dataset.input_shape, dataset.num_classes, seed=seed)
    metrics = train(model, dataset, cfg)
    accuracy, loss = evaluate(model, dataset, "test")
    out = Path(args.out)
    save_model(model, out)
    (out / "train_metrics.json").write_text(
        json.dumps({"epochs": metrics, "test_accuracy": accuracy, "test_loss": loss}, indent=1)
    )
    print(f"trained {arch} on {dataset.name}: test accuracy={accuracy:.4f} loss={loss:.4f}")
    return 0


def cmd_quantize(args):
    config = _base_config(args)
    model = load_model(args.model)
    bits = _pick(args.bits, config["quantize"]["bits"])
    qmodel = quantize_model(model, bits)
    save_model(qmodel, args.out)
    print(f"quantized to {bits} bits: {args.out}")
    return 0


def cmd_distill(args):
    config = _base_config(args)
    model = load_model(args.model)
    dc = config["distill"]
    cfg = DistillConfig(
        batch_size=_pick(args.batch_size, dc.get("batch_size", DistillConfig.batch_size)),
        iterations=_pick(args.iterations, dc.get("iterations", DistillConfig.iterations)),
        alpha=_pick(args.alpha, dc.get("alpha", DistillConfig.alpha)),
        beta=_pick(args.beta, dc.get("beta", DistillConfig.beta)),
        lr=_pick(args.lr, dc.get("lr", DistillConfig.lr)),
        seed=_pick(args.seed, 0),
    ).validate()
    batch = distill(model, cfg)
    save_batch(batch, args.out)
    ratio = batch.final_bn_loss / max(batch.history[0]["bn_loss"], 1e-30)
    print(
        f"distilled {cfg.batch_size} samples in {cfg.iterations} iterations: "
        f"bn_loss {batch.history[0]['bn_loss']:.4f} -> {batch.final_bn_loss:.4f} "
        f"(x{ratio:.4f}), dnn_loss {batch.final_dnn_loss:.4f}"
    )
    return 0


def cmd_attack(args):
    config = _base_config(args)
    model = load_model(args.model)
    ac = config["attack"]
    cfg = AttackConfig(
        max_flips=_pick(args.max_flips, ac.get("max_flips", AttackConfig.max_flips)),
        candidates_per_layer=_pick(
            args.candidates_per_layer, ac.get("candidates_per_layer", AttackConfig.candidates_per_layer)
        ),
        target_accuracy=_pick(args.target_accuracy, ac.get("target_accuracy", None)),
        seed=_pick(args.seed, 0),
    ).validate()

    eval_set = None
    dataset = None
    if args.dataset or args.data_path:
        dataset = _load_dataset(args, config)
        eval_set = dataset.subset("test")

    if args.mode == "bdfa":
        if not args.distilled:
            raise ConfigError("--distilled is required in bdfa mode")
        batch = load_batch(args.distilled)
        x_data, labels = batch.images, batch.labels
    else:
        if dataset is None:
            raise ConfigError("bfa mode needs a real batch: pass --dataset (and friends)")
        images, all_labels = dataset.subset("test")
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(len(all_labels), size=min(128, len(all_labels)), replace=False)
        x_data, labels = images[idx], all_labels[idx]

    trace = run_attack(model, x_data, labels, cfg, eval_set=eval_set)
    trace.mode = args.mode
    if dataset is not None:
        trace.meta = {"dataset": dataset.name}
    save_trace(trace, args.out)
    last_acc = trace.accuracies[-1] if trace.records and trace.accuracies[-1] is not None else None
    acc_text = "n/a" if last_acc is None else f"{last_acc:.4f}"
    print(
        f"{args.mode} attack committed {trace.num_flips} flips: "
        f"loss {trace.clean_loss:.4f} -> {trace.losses[-1] if trace.records else trace.clean_loss:.4f}, "
        f"accuracy {acc_text}"
    )
    return 0


def cmd_evaluate(args):
    config = _base_config(args)
    model = load_model(args.model)
    dataset = _load_dataset(args, config)
    accuracy, loss = evaluate(model, dataset, args.split)
    print(f"accuracy={accuracy:.6f} loss={loss:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluate.json").write_text(
            json.dumps({"split": args.split, "accuracy": accuracy, "loss": loss}, indent=1)
        )
    return 0


def cmd_experiment(args):
    config = load_experiment_config(args.config)
    if args.seed is not None:
        config["experiment"]["seeds"] = [args.seed]
    run_experiment(config, args.out)
    print(f"experiment complete: {args.out}")
    return 0


def cmd_report(args):
    result = report(args.trace_dir, args.out)
    if args.stdout:
        print(result["markdown"])
    else:
        print(f"wrote {result['svg']} and {result['md']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blindflip",
        description="Blind-data bit-flip attacks on quantized CNNs",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a desk-scale victim")
    _add_common(p)
    _add_dataset_flags(p)
    p.add_argument("--arch", default=None, choices=sorted(ARCHITECTURES))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="quantize a trained model's weights")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--bits", type=int, default=None)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("distill", help="generate a synthetic batch from BN statistics")
    _add_common(p)
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("attack", help="run progressive bit search")
    _add_common(p)
    _add_dataset_flags(p)
    p.add_argument("--mode", required=True, choices=["bdfa", "bfa"])
    p.add_argument("--model", required=True, help="quantized model directory")
    p.add_argument("--distilled", default=None, help="distilled batch directory (bdfa)")
    p.add_argument("--max-flips", type=int, default=None)
    p.add_argument("--candidates-per-layer", type=int, default=None)
    p.add_argument("--target-accuracy", type=float, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a model on a dataset split")
    _add_common(p, out_required=False)
    _add_dataset_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="full multi-seed pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="run a single seed instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render SVG chart + markdown table from a trace")
    p.add_argument("trace_dir")
    p.add_argument("--out", default=None, help="output directory (defaults to trace dir)")
    p.add_argument("--stdout", action="store_true", help="print the markdown to stdout")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except BlindflipError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
