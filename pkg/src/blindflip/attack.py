"""Progressive bit search over a quantized model's weight bits.

Each step ranks every layer's bits by the magnitude of their loss gradient,
keeps candidates whose flip direction is estimated to increase the loss,
measures the true post-flip loss of each layer's top candidates, and commits
the single flip that raises the loss most across all layers. The search works
identically on a real data batch (the data-dependent baseline) and on a
distilled batch (blind-data mode).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, QuantizationError, ReplayError, StallError
from .model import ModelGraph, forward
from .quant import BitAddress, FlipRecord, apply_flip, bit_gradients, code_bits, write_flip_trace
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    max_flips: int = 30
    candidates_per_layer: int = 1
    target_accuracy: float | None = None
    seed: int = 0
    eval_batch_size: int = 256

    def validate(self):
        if self.max_flips < 1:
            raise ConfigError(f"max_flips must be >= 1, got {self.max_flips}")
        if self.candidates_per_layer < 1:
            raise ConfigError(
                f"candidates_per_layer must be >= 1, got {self.candidates_per_layer}"
            )
        if self.target_accuracy is not None and not 0.0 <= self.target_accuracy <= 1.0:
            raise ConfigError(f"target_accuracy must be in [0, 1], got {self.target_accuracy}")
        return self


@dataclass
class AttackTrace:
    """Committed flips plus the loss/accuracy series they produced."""

    config: dict
    clean_loss: float
    clean_accuracy: float | None = None
    records: list = field(default_factory=list)
    stalled: bool = False
    stall_reason: str | None = None
    evaluations: int = 0
    mode: str = ""
    meta: dict = field(default_factory=dict)  # arch/dataset names, for reports

    @property
    def losses(self):
        return [r.loss_after for r in self.records]

    @property
    def accuracies(self):
        return [r.accuracy_after for r in self.records]

    @property
    def num_flips(self):
        return len(self.records)


def batch_loss(model: ModelGraph, x_data: np.ndarray, labels: np.ndarray) -> float:
    """Eval-mode cross-entropy of the batch; no gradients recorded."""
    logits = forward(model, Tensor(x_data), mode="eval")
    return T.softmax_cross_entropy(logits, labels).item()


def evaluate_accuracy(model: ModelGraph, x_data, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    correct = 0
    for lo in range(0, len(labels), batch_size):
        logits = forward(model, Tensor(x_data[lo : lo + batch_size]), mode="eval")
        correct += int((logits.data.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return correct / len(labels)


def _quantized_layers(model: ModelGraph):
    layers = model.attackable_layers()
    missing = [i for i, l in layers if l.qlayer is None]
    if missing:
        raise QuantizationError(f"layers {missing} are not quantized; quantize the model first")
    return layers


def rank_bits_in_layer(qlayer, bit_grads: np.ndarray, k: int = 1) -> list[BitAddress]:
    """Top-k bit addresses by |gradient|, keeping only loss-increasing flips.

    A toggle moves bit b by (1 - 2b), so its first-order loss change is
    grad * (1 - 2b); candidates need that estimate positive. Ties in
    |gradient| resolve by (weight_index, bit_position) ascending, which is
    exactly flat-index order.
    """
    bit_grads = np.asarray(bit_grads, dtype=np.float64).reshape(-1)
    bits = code_bits(qlayer.codes, qlayer.q)
    estimate = bit_grads * (1.0 - 2.0 * bits)
    order = np.argsort(-np.abs(bit_grads), kind="stable")
    out = []
    for flat in order:
        if estimate[flat] <= 0.0:
            continue
        w, bit = divmod(int(flat), qlayer.q)
        out.append(BitAddress(qlayer.layer_id, w, bit))
        if len(out) == k:
            break
    return out


def progressive_search_step(
    model: ModelGraph, x_data: np.ndarray, labels: np.ndarray, k: int = 1
) -> tuple[FlipRecord, int]:
    """Commit the cross-layer best flip for the current batch.

    Inner-layer: gradient-rank each layer's bits and take its top-k valid
    candidates. Cross-layer: tentatively apply each candidate, measure the
    true batch loss, undo, and commit the flip with the largest post-flip
    loss (ties: lowest layer, then rank order). Returns the committed record
    and the number of loss evaluations spent.
    """
    layers = _quantized_layers(model)
    model.set_requires_grad(True)
    model.zero_grad()
    loss_t = T.softmax_cross_entropy(forward(model, Tensor(x_data), mode="eval"), labels)
    backward(loss_t)
    loss_before = loss_t.item()
    evaluations = 1

    best = None  # (loss_after, layer_obj, address)
    for idx, layer in layers:
        grads = layer.weight.grad
        if grads is None:
            continue
        candidates = rank_bits_in_layer(layer.qlayer, bit_gradients(layer.qlayer, grads), k)
        for addr in candidates:
            apply_flip(layer, addr.weight_index, addr.bit_position)
            trial = batch_loss(model, x_data, labels)
            apply_flip(layer, addr.weight_index, addr.bit_position)  # undo
            evaluations += 1
            if not np.isfinite(trial):
                log.warning("discarding candidate %s: non-finite loss", addr)
                continue
            if best is None or trial > best[0]:
                best = (trial, layer, addr)

    if best is None:
        raise StallError("attack stalled: no flippable candidate in any layer")
    loss_after, layer, addr = best
    if loss_after < loss_before:
        raise StallError(
            f"attack stalled: best candidate lowers the loss ({loss_after:.6g} < {loss_before:.6g})"
        )
    before, after = apply_flip(layer, addr.weight_index, addr.bit_position)
    record = FlipRecord(
        layer_id=addr.layer_id,
        weight_index=addr.weight_index,
        bit_position=addr.bit_position,
        code_before=before,
        code_after=after,
        loss_before=loss_before,
        loss_after=loss_after,
    )
    return record, evaluations


def run_attack(
    model: ModelGraph,
    x_data: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    eval_set=None,
) -> AttackTrace:
    """Repeat progressive search until the flip budget, accuracy floor, or a stall.

    ``eval_set`` is an optional (images, labels) pair; accuracy after each
    flip is measured on it for reporting only and never steers the search.
    A stall after at least one committed flip truncates the trace; a stall
    before any flip propagates.
    """
    cfg.validate()
    _quantized_layers(model)
    trace = AttackTrace(config=asdict(cfg), clean_loss=batch_loss(model, x_data, labels))
    trace.evaluations = 1
    if eval_set is not None:
        trace.clean_accuracy = evaluate_accuracy(model, *eval_set, cfg.eval_batch_size)

    for _ in range(cfg.max_flips):
        try:
            record, evaluations = progressive_search_step(
                model, x_data, labels, cfg.candidates_per_layer
            )
        except StallError as e:
            if not trace.records:
                raise
            trace.stalled = True
            trace.stall_reason = str(e)
            break
        trace.evaluations += evaluations
        if eval_set is not None:
            record.accuracy_after = evaluate_accuracy(model, *eval_set, cfg.eval_batch_size)
        trace.records.append(record)
        if (
            cfg.target_accuracy is not None
            and record.accuracy_after is not None
            and record.accuracy_after <= cfg.target_accuracy
        ):
            break
    return trace


def replay_trace(model: ModelGraph, records) -> ModelGraph:
    """Re-apply a flip sequence to a fresh copy of the original model."""
    layers = dict(_quantized_layers(model))
    for i, rec in enumerate(records):
        layer = layers.get(rec.layer_id)
        if layer is None:
            raise ReplayError(f"record {i}: layer {rec.layer_id} is not attackable")
        current = int(layer.qlayer.codes.reshape(-1)[rec.weight_index])
        if current != rec.code_before:
            raise ReplayError(
                f"record {i}: code mismatch at layer {rec.layer_id} index {rec.weight_index}: "
                f"model has {current}, trace expects {rec.code_before}"
            )
        _, after = apply_flip(layer, rec.weight_index, rec.bit_position)
        if after != rec.code_after:
            raise ReplayError(f"record {i}: flip produced {after}, trace expects {rec.code_after}")
    return model


# ---------------------------------------------------------------------------
# trace files: JSON (full), JSONL (records), CSV (plot-ready series)

def save_trace(trace: AttackTrace, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": trace.config,
        "mode": trace.mode,
        "meta": trace.meta,
        "clean_loss": trace.clean_loss,
        "clean_accuracy": trace.clean_accuracy,
        "stalled": trace.stalled,
        "stall_reason": trace.stall_reason,
        "evaluations": trace.evaluations,
        "records": [asdict(r) for r in trace.records],
    }
    (path / "trace.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    write_flip_trace(trace.records, path / "records.jsonl")
    with open(path / "trace.csv", "w") as fh:
        fh.write("flip,loss,accuracy\n")
        acc0 = "" if trace.clean_accuracy is None else repr(trace.clean_accuracy)
        fh.write(f"0,{trace.clean_loss!r},{acc0}\n")
        for i, r in enumerate(trace.records, start=1):
            acc = "" if r.accuracy_after is None else repr(r.accuracy_after)
            fh.write(f"{i},{r.loss_after!r},{acc}\n")


def load_trace(path) -> AttackTrace:
    doc = json.loads((Path(path) / "trace.json").read_text())
    trace = AttackTrace(
        config=doc["config"],
        clean_loss=doc["clean_loss"],
        clean_accuracy=doc["clean_accuracy"],
        stalled=doc["stalled"],
        stall_reason=doc["stall_reason"],
        evaluations=doc["evaluations"],
        mode=doc.get("mode", ""),
        meta=doc.get("meta", {}),
    )
    trace.records = [FlipRecord(**r) for r in doc["records"]]
    return trace
