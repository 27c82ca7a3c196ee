"""Victim networks: ordered layer graphs with BN running statistics.

A ModelGraph is a flat list of layers (conv / BN / ReLU / pooling / linear /
residual-add / flatten). Residual connections are plain ``ResidualAdd`` layers
referencing an earlier layer's output, which keeps the graph an ordered list.

Serialization is a directory holding a JSON manifest (architecture, shapes,
per-tensor offsets and checksums) plus one little-endian binary blob for all
tensors, so reloaded weights are byte-identical.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    ChecksumError,
    ConsistencyError,
    FormatError,
    NonFiniteError,
    ShapeError,
    StateError,
    TruncationError,
    VersionError,
)
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST_MAGIC = "BLINDFLIP-MODEL"
BLOB_MAGIC = b"BFBLOB01"


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, bias=True):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = T._pair(kernel)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        kh, kw = self.kernel
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kh, kw), dtype=np.float32), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True) if bias else None
        self.qlayer = None  # set by quant.quantize_model

    def init_params(self, rng):
        kh, kw = self.kernel
        fan_in = self.in_channels * kh * kw
        self.weight.data = _kaiming_uniform(rng, self.weight.shape, fan_in, np.float32)

    def apply(self, x, ctx):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def hyperparams(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "bias": self.bias is not None,
        }

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def buffers(self):
        return []


class Linear:
    """Fully connected layer; weight stored as (in_features, out_features)."""

    kind = "linear"

    def __init__(self, in_features, out_features, bias=True):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = Tensor(
            np.zeros((in_features, out_features), dtype=np.float32), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True) if bias else None
        self.qlayer = None

    def init_params(self, rng):
        self.weight.data = _kaiming_uniform(rng, self.weight.shape, self.in_features, np.float32)

    def apply(self, x, ctx):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def hyperparams(self):
        return {
            "in_features": self.in_features,
            "out_features": self.out_features,
            "bias": self.bias is not None,
        }

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def buffers(self):
        return []


class BatchNorm2d:
    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        # (mean, std) of the last training-mode batch, detached
        self.last_batch_stats = None

    def init_params(self, rng):
        pass

    def apply(self, x, ctx):
        training = ctx["mode"] == "train"
        if ctx["capture"] is not None:
            # Differentiable stats of the BN *input*, for the distillation loss.
            ctx["capture"].append((T.channel_mean(x), T.channel_std(x)))
        out, stats = T.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            eps=self.eps,
            momentum=self.momentum,
            update_running=ctx["update_running"] and training,
        )
        if stats is not None:
            self.last_batch_stats = stats
        return out

    def hyperparams(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class _Stateless:
    def init_params(self, rng):
        pass

    def parameters(self):
        return []

    def buffers(self):
        return []

    def hyperparams(self):
        return {}


class ReLU(_Stateless):
    kind = "relu"

    def apply(self, x, ctx):
        return T.relu(x)


class MaxPool2d(_Stateless):
    kind = "maxpool2d"

    def __init__(self, kernel, stride=None):
        self.kernel = T._pair(kernel)
        self.stride = T._pair(stride if stride is not None else kernel)

    def apply(self, x, ctx):
        return T.maxpool2d(x, self.kernel, self.stride)

    def hyperparams(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}


class AvgPool2d(_Stateless):
    kind = "avgpool2d"

    def __init__(self, kernel, stride=None):
        self.kernel = T._pair(kernel)
        self.stride = T._pair(stride if stride is not None else kernel)

    def apply(self, x, ctx):
        return T.avgpool2d(x, self.kernel, self.stride)

    def hyperparams(self):
        return {"kernel": list(self.kernel), "stride": list(self.stride)}


class Flatten(_Stateless):
    kind = "flatten"

    def apply(self, x, ctx):
        return T.flatten(x)


class ResidualAdd(_Stateless):
    """Adds the output of an earlier layer (by index) to the current activation."""

    kind = "residual_add"

    def __init__(self, source):
        self.source = int(source)

    def apply(self, x, ctx):
        skip = ctx["activations"][self.source]
        if skip.shape != x.shape:
            raise ShapeError(
                f"residual_add: skip output {skip.shape} does not match activation {x.shape}"
            )
        return T.add(x, skip)

    def hyperparams(self):
        return {"source": self.source}


_LAYER_KINDS = {
    "conv2d": Conv2d,
    "linear": Linear,
    "batchnorm2d": BatchNorm2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "avgpool2d": AvgPool2d,
    "flatten": Flatten,
    "residual_add": ResidualAdd,
}


class ModelGraph:
    """Ordered layer list with a single classification head."""

    def __init__(self, layers, num_classes, input_shape, mode="eval"):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.mode = mode
        self._validate_head()

    def _validate_head(self):
        heads = [l for l in self.layers if isinstance(l, Linear)]
        if not heads:
            raise ConsistencyError("model has no linear output head")
        if heads[-1].out_features != self.num_classes:
            raise ConsistencyError(
                f"head outputs {heads[-1].out_features} classes, manifest declares {self.num_classes}"
            )

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters():
                out.append((f"layers.{i}.{name}", p))
        return out

    def buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers():
                out.append((f"layers.{i}.{name}", b))
        return out

    def bn_layers(self):
        return [l for l in self.layers if isinstance(l, BatchNorm2d)]

    def attackable_layers(self):
        """(index, layer) pairs whose weights the bit search may target."""
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, (Conv2d, Linear))]

    def set_requires_grad(self, flag):
        for _, p in self.parameters():
            p.requires_grad = bool(flag)

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def clone(self):
        m = ModelGraph.__new__(ModelGraph)
        m.num_classes = self.num_classes
        m.input_shape = self.input_shape
        m.mode = self.mode
        m.layers = []
        for layer in self.layers:
            new = _LAYER_KINDS[layer.kind](**layer.hyperparams())
            for (name, p), (_, q) in zip(layer.parameters(), new.parameters()):
                q.data = p.data.copy()
            for (name, b), (_, c) in zip(layer.buffers(), new.buffers()):
                c[:] = b
            if getattr(layer, "qlayer", None) is not None:
                new.qlayer = layer.qlayer.clone()
            if isinstance(layer, BatchNorm2d) and layer.last_batch_stats is not None:
                new.last_batch_stats = (
                    layer.last_batch_stats[0].copy(),
                    layer.last_batch_stats[1].copy(),
                )
            m.layers.append(new)
        return m

    def state_bytes(self):
        """Concatenated raw bytes of all parameters and buffers (for invariance checks)."""
        chunks = [p.data.tobytes() for _, p in self.parameters()]
        chunks += [b.tobytes() for _, b in self.buffers()]
        return b"".join(chunks)


def forward(model: ModelGraph, x: Tensor, mode=None, update_running=None, capture=False):
    """Run the network; returns logits, or (logits, stats) when ``capture`` is set.

    ``mode`` defaults to the model's mode flag. In train mode BN layers
    normalize with batch statistics and, unless ``update_running=False``, fold
    them into the running buffers. ``capture`` collects differentiable
    (mean, std) of every BN layer's input.
    """
    mode = mode or model.mode
    if mode not in ("train", "eval"):
        raise ValueError(f"forward: unknown mode {mode!r}")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"forward: input shape {tuple(x.shape[1:])} does not match model input {model.input_shape}"
        )
    ctx = {
        "mode": mode,
        "update_running": True if update_running is None else bool(update_running),
        "capture": [] if capture else None,
        "activations": [],
    }
    h = x
    for i, layer in enumerate(model.layers):
        try:
            h = layer.apply(h, ctx)
        except NonFiniteError as e:
            raise NonFiniteError(f"layer {i} ({layer.kind}): {e}") from None
        if not np.isfinite(h.data).all():
            raise NonFiniteError(f"layer {i} ({layer.kind}): non-finite activation")
        ctx["activations"].append(h)
    if h.data.ndim != 2 or h.shape[1] != model.num_classes:
        raise ShapeError(
            f"forward: head produced {h.shape}, expected (N, {model.num_classes})"
        )
    if capture:
        return h, ctx["capture"]
    return h


def capture_bn_batch_stats(model: ModelGraph, x: Tensor | None = None):
    """Per-BN-layer (mean, std) of the batch inputs, as detached numpy arrays.

    With ``x`` given, runs a training-statistics forward (running stats are
    not touched). Without ``x``, returns the stats recorded by the most
    recent training-mode forward; raises StateError if none has run.
    """
    bns = model.bn_layers()
    if not bns:
        raise StateError("capture_bn_batch_stats: model has no BN layers")
    if x is not None:
        _, stats = forward(model, x, mode="train", update_running=False, capture=True)
        return [(mu.data.copy(), sigma.data.copy()) for mu, sigma in stats]
    if any(l.last_batch_stats is None for l in bns):
        raise StateError("capture_bn_batch_stats: no training-mode forward has run yet")
    return [(l.last_batch_stats[0].copy(), l.last_batch_stats[1].copy()) for l in bns]


def running_bn_stats(model: ModelGraph):
    """Per-BN-layer (running mean, running std); the std is sqrt(running var)."""
    return [
        (l.running_mean.astype(np.float64), np.sqrt(l.running_var.astype(np.float64)))
        for l in model.bn_layers()
    ]


# ---------------------------------------------------------------------------
# architectures

# The victims end in global average pooling so the head sees one feature per
# channel; a handful of conv-weight flips then corrupts a large fraction of
# the whole representation, which is what makes desk-scale bit attacks
# behave like full-scale ones.

def _cnn2(input_shape, num_classes):
    c, h, w = input_shape
    return [
        Conv2d(c, 8, 3, stride=1, padding=1),
        BatchNorm2d(8),
        ReLU(),
        MaxPool2d(2),
        Conv2d(8, 16, 3, stride=1, padding=1),
        BatchNorm2d(16),
        ReLU(),
        AvgPool2d(h // 2),
        Flatten(),
        Linear(16, num_classes),
    ]


def _cnn2res(input_shape, num_classes):
    c, h, w = input_shape
    return [
        Conv2d(c, 8, 3, stride=1, padding=1),
        BatchNorm2d(8),
        ReLU(),  # index 2: residual source
        Conv2d(8, 8, 3, stride=1, padding=1),
        BatchNorm2d(8),
        ReLU(),
        ResidualAdd(source=2),
        MaxPool2d(2),
        Conv2d(8, 16, 3, stride=1, padding=1),
        BatchNorm2d(16),
        ReLU(),
        AvgPool2d(h // 2),
        Flatten(),
        Linear(16, num_classes),
    ]


def _linear1(input_shape, num_classes):
    n_in = int(np.prod(input_shape))
    layers = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    layers.append(Linear(n_in, num_classes))
    return layers


ARCHITECTURES = {
    "cnn2": _cnn2,
    "cnn2res": _cnn2res,
    "linear1": _linear1,
}


def build_model(arch: str, input_shape, num_classes: int, seed: int = 0) -> ModelGraph:
    """Construct and initialize a named victim architecture."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
    layers = ARCHITECTURES[arch](tuple(input_shape), num_classes)
    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.init_params(rng)
    model = ModelGraph(layers, num_classes, input_shape)
    return model


# ---------------------------------------------------------------------------
# serialization

def _tensor_entries(model: ModelGraph):
    """(name, array) pairs to serialize, in deterministic order."""
    entries = []
    for i, layer in enumerate(model.layers):
        q = getattr(layer, "qlayer", None)
        for name, p in layer.parameters():
            if q is not None and name == "weight":
                # weight is derived from codes at load time
                entries.append((f"layers.{i}.codes", q.codes.astype("<i1")))
            else:
                entries.append((f"layers.{i}.{name}", p.data))
        for name, b in layer.buffers():
            entries.append((f"layers.{i}.{name}", b))
    return entries


def save_model(model: ModelGraph, path):
    """Write a model directory: manifest.json + tensors.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray(BLOB_MAGIC)
    tensors = []
    for name, arr in _tensor_entries(model):
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int8:
            dtype = "<i1"
        else:
            arr = arr.astype(np.float32)
            dtype = "<f4"
        raw = arr.astype(dtype).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": len(blob),
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blob.extend(raw)

    quant = {}
    for i, layer in enumerate(model.layers):
        q = getattr(layer, "qlayer", None)
        if q is not None:
            quant[str(i)] = {"q": q.q, "delta": float(q.delta)}

    manifest = {
        "magic": MANIFEST_MAGIC,
        "format_version": FORMAT_VERSION,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layers": [{"kind": l.kind, **l.hyperparams()} for l in model.layers],
        "quant": quant,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "tensors.bin").write_bytes(bytes(blob))


def load_model(path) -> ModelGraph:
    """Reconstruct a model saved by save_model; reloaded arrays are byte-identical."""
    from .quant import QuantizedLayer

    path = Path(path)
    manifest_path = path / "manifest.json"
    blob_path = path / "tensors.bin"
    if not manifest_path.exists():
        raise FormatError(f"format error: missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"format error: manifest is not valid JSON ({e})") from None
    if manifest.get("magic") != MANIFEST_MAGIC:
        raise FormatError(f"format error: bad manifest magic {manifest.get('magic')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"version error: file version {manifest.get('format_version')}, supported {FORMAT_VERSION}"
        )
    blob = blob_path.read_bytes() if blob_path.exists() else b""
    if blob[: len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise FormatError("format error: bad blob magic")

    arrays = {}
    for entry in manifest["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise TruncationError(
                f"truncated file: tensor {entry['name']} needs bytes up to {hi}, blob has {len(blob)}"
            )
        raw = blob[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"checksum failure: tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()

    layers = []
    for i, spec in enumerate(manifest["layers"]):
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind not in _LAYER_KINDS:
            raise ConsistencyError(f"consistency error: unknown layer kind {kind!r}")
        layer = _LAYER_KINDS[kind](**spec)
        qinfo = manifest.get("quant", {}).get(str(i))
        for name, p in layer.parameters():
            key = f"layers.{i}.{name}"
            if qinfo is not None and name == "weight":
                codes = arrays[f"layers.{i}.codes"].astype(np.int16).reshape(p.shape)
                layer.qlayer = QuantizedLayer(
                    layer_id=i, q=int(qinfo["q"]), delta=float(qinfo["delta"]), codes=codes
                )
                p.data = (layer.qlayer.delta * codes).astype(np.float32)
                continue
            if key not in arrays:
                raise ConsistencyError(f"consistency error: tensor {key} missing from manifest")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise ConsistencyError(
                    f"consistency error: tensor {key} has shape {arrays[key].shape}, expected {p.shape}"
                )
            p.data = arrays[key].astype(np.float32)
        for name, b in layer.buffers():
            key = f"layers.{i}.{name}"
            if key not in arrays:
                raise ConsistencyError(f"consistency error: buffer {key} missing from manifest")
            b[:] = arrays[key]
        layers.append(layer)

    try:
        return ModelGraph(layers, manifest["num_classes"], manifest["input_shape"])
    except ConsistencyError as e:
        raise ConsistencyError(f"consistency error: {e}") from None
