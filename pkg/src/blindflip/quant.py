"""Per-layer symmetric uniform quantization and the two's-complement bit view.

Conv and linear weights become signed q-bit integer codes with one positive
step size per layer (w = delta * code). Codes are kept as int16 in memory so
bit arithmetic never overflows; files store them as signed 8-bit. After a bit
flip a code may reach -2^(q-1), one step outside the symmetric quantization
range, exactly like a real memory fault would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import QuantizationError, ShapeError
from .model import ModelGraph

DEFAULT_BITS = 8


@dataclass
class QuantizedLayer:
    """Integer weight codes plus the per-layer step size.

    ``codes`` has the same shape as the weight tensor it replaces; the flat
    weight index used in bit addresses is the row-major index into it.
    """

    layer_id: int
    q: int
    delta: float
    codes: np.ndarray

    def __post_init__(self):
        if not 2 <= self.q <= 8:
            raise QuantizationError(f"bit width {self.q} outside [2, 8]")
        if not self.delta > 0:
            raise QuantizationError(f"step size must be positive, got {self.delta}")
        self.codes = np.asarray(self.codes, dtype=np.int16)

    @property
    def num_weights(self) -> int:
        return self.codes.size

    @property
    def num_bits(self) -> int:
        return self.codes.size * self.q

    def dequantize(self) -> np.ndarray:
        return (self.delta * self.codes).astype(np.float32)

    def clone(self) -> "QuantizedLayer":
        return QuantizedLayer(self.layer_id, self.q, self.delta, self.codes.copy())


@dataclass(frozen=True)
class BitAddress:
    layer_id: int
    weight_index: int
    bit_position: int


@dataclass
class FlipRecord:
    """One committed (or replayable) bit flip with its loss bookkeeping."""

    layer_id: int
    weight_index: int
    bit_position: int
    code_before: int
    code_after: int
    loss_before: float
    loss_after: float
    accuracy_after: float | None = None

    @property
    def address(self) -> BitAddress:
        return BitAddress(self.layer_id, self.weight_index, self.bit_position)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "FlipRecord":
        return cls(**json.loads(line))


def flip(code: int, bit: int, q: int = DEFAULT_BITS) -> int:
    """Toggle one bit of a signed q-bit two's-complement code."""
    if not 0 <= bit < q:
        raise ShapeError(f"flip: bit {bit} outside [0, {q})")
    u = (int(code) & ((1 << q) - 1)) ^ (1 << bit)
    return u - (1 << q) if u >= (1 << (q - 1)) else u


def quantize_model(model: ModelGraph, q: int = DEFAULT_BITS) -> ModelGraph:
    """Return a copy of the model with conv/linear weights quantized to q bits.

    delta = max|W| / (2^(q-1) - 1); codes = round-half-even(W / delta),
    clamped to the symmetric range. Biases and BN parameters stay in float.
    The copy's float weights are kept in sync with delta * codes.
    """
    if not 2 <= q <= 8:
        raise QuantizationError(f"bit width {q} outside [2, 8]")
    out = model.clone()
    top = (1 << (q - 1)) - 1
    for idx, layer in out.attackable_layers():
        w = layer.weight.data
        max_abs = float(np.abs(w).max())
        if max_abs == 0.0:
            raise QuantizationError(f"layer {idx}: all-zero weight tensor, step size undefined")
        delta = max_abs / top
        codes = np.clip(np.rint(w / delta), -top, top).astype(np.int16)
        layer.qlayer = QuantizedLayer(layer_id=idx, q=q, delta=delta, codes=codes)
        layer.weight.data = layer.qlayer.dequantize()
    return out


def apply_flip(layer, weight_index: int, bit: int) -> tuple[int, int]:
    """Flip one bit of a quantized layer's code and resync the float weight.

    Returns (code_before, code_after). Calling it again with the same address
    undoes the flip.
    """
    ql = layer.qlayer
    if ql is None:
        raise QuantizationError("apply_flip: layer is not quantized")
    flat = ql.codes.reshape(-1)
    if not 0 <= weight_index < flat.size:
        raise ShapeError(f"apply_flip: weight index {weight_index} outside [0, {flat.size})")
    before = int(flat[weight_index])
    after = flip(before, bit, ql.q)
    flat[weight_index] = after
    layer.weight.data.reshape(-1)[weight_index] = np.float32(ql.delta * after)
    return before, after


def bit_gradients(qlayer: QuantizedLayer, weight_grads: np.ndarray) -> np.ndarray:
    """Chain rule from weight gradients to per-bit gradients.

    w = delta * (-b_{q-1} * 2^(q-1) + sum_{i<q-1} b_i * 2^i), so the gradient
    of bit i is dL/dw * delta * 2^i, and the sign bit carries -2^(q-1).
    Layout is weight-major: entry w * q + i is bit i of weight w.
    """
    g = np.asarray(weight_grads, dtype=np.float64).reshape(-1)
    if g.size != qlayer.num_weights:
        raise ShapeError(
            f"bit_gradients: got {g.size} weight grads for {qlayer.num_weights} weights"
        )
    q = qlayer.q
    place = np.array([float(1 << i) for i in range(q - 1)] + [-float(1 << (q - 1))])
    return (g[:, None] * (qlayer.delta * place)[None, :]).reshape(-1)


def code_bits(codes: np.ndarray, q: int) -> np.ndarray:
    """Bit values of each code, weight-major (shape: codes.size * q)."""
    u = (codes.astype(np.int64).reshape(-1) & ((1 << q) - 1))[:, None]
    return ((u >> np.arange(q)[None, :]) & 1).astype(np.int8).reshape(-1)


def hamming_distance(original, current, q: int = DEFAULT_BITS) -> int:
    """Total differing bits between two aligned code collections.

    Accepts flat arrays or lists of arrays (one per layer).
    """
    if isinstance(original, np.ndarray):
        original, current = [original], [current]
    if len(original) != len(current):
        raise ShapeError("hamming_distance: layer counts differ")
    total = 0
    mask = (1 << q) - 1
    for a, b in zip(original, current):
        a = np.asarray(a).reshape(-1)
        b = np.asarray(b).reshape(-1)
        if a.size != b.size:
            raise ShapeError(f"hamming_distance: lengths differ, {a.size} vs {b.size}")
        x = (a.astype(np.int64) & mask) ^ (b.astype(np.int64) & mask)
        for i in range(q):
            total += int(((x >> i) & 1).sum())
    return total


def model_codes(model: ModelGraph) -> list[np.ndarray]:
    """Flat code arrays of every quantized layer, in layer order."""
    out = []
    for _, layer in model.attackable_layers():
        if layer.qlayer is not None:
            out.append(layer.qlayer.codes.reshape(-1).copy())
    return out


def write_flip_trace(records, path):
    """One FlipRecord JSON object per line."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_flip_trace(path) -> list[FlipRecord]:
    with open(path) as fh:
        return [FlipRecord.from_json(line) for line in fh if line.strip()]
