"""Dense tensors with reverse-mode automatic differentiation.

Minimal numpy-backed autograd: enough for CNN forward/backward and for
differentiating a loss with respect to the *input* batch, which the data
distillation loop needs. Each forward op records a tape node when any input
requires gradients; the tape is rebuilt on every forward pass and consumed by
a single backward() call.

Working precision is float32. float64 is supported purely so gradients can be
verified against central finite differences, which are unreliable at float32.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Node:
    """Tape entry: the op name, parent tensors, and the vjp closure."""

    __slots__ = ("op", "parents", "grad_fn", "consumed")

    def __init__(self, op, parents, grad_fn):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn
        self.consumed = False


class Tensor:
    """n-dimensional real array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        # float32 is the working precision; float64 must be requested, either
        # via dtype= or by passing an ndarray that is already float64.
        arr = np.asarray(data, dtype=dtype)
        keeps = isinstance(data, (np.ndarray, np.generic)) and arr.dtype in _FLOAT_DTYPES
        if (dtype is None and not keeps) or arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _check_finite(op: str, *tensors: Tensor):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input")


def _result(op: str, out_data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out.node = Node(op, tuple(parents), grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # Inverse of numpy broadcasting: sum over the expanded axes.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate .grad of every requires_grad tensor reachable from ``loss``.

    The loss must be a scalar produced by a recorded op; a tape may be
    consumed only once (rerun the forward pass to differentiate again).
    """
    if loss.node is None:
        raise TapeError("backward: tensor is not on the tape")
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node.consumed:
        raise TapeError("backward: tape already consumed; rerun the forward pass")

    # Reverse topological order via iterative DFS over tape nodes.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            stack.append((p, False))

    flows = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        t.node.consumed = True
        for p, pg in zip(t.node.parents, t.node.grad_fn(g)):
            if pg is None:
                continue
            if p.node is None:
                if p.requires_grad:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                k = id(p)
                flows[k] = pg if k not in flows else flows[k] + pg


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_finite("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_finite("sub", a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_finite("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result("mul", out, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result("relu", np.where(mask, x.data, x.data.dtype.type(0)), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result("reshape", x.data.reshape(shape), (x,), grad_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got {x.shape}")
    return reshape(x, (x.shape[0], -1))


def tsum(x: Tensor) -> Tensor:
    _check_finite("sum", x)
    shape = x.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result("sum", x.data.sum(dtype=x.dtype), (x,), grad_fn)


def tmean(x: Tensor) -> Tensor:
    _check_finite("mean", x)
    shape = x.data.shape
    n = x.data.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, shape).astype(x.dtype, copy=True),)

    return _result("mean", x.data.mean(dtype=x.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    _check_finite("matmul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", ad @ bd, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# convolution and pooling

def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Gather sliding windows into (N, C, kh, kw, Ho, Wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols


def _scatter_windows(gcols: np.ndarray, xp_shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Adjoint of _windows: scatter-add window grads back onto the padded input."""
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, i, j]
    return gxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with padding {padding}")
    parents = (x, w) if bias is None else (x, w, bias)
    _check_finite("conv2d", *parents)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _windows(xp, kh, kw, sh, sw, ho, wo)
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(f, -1)
    out = np.matmul(w2[None], cols2).reshape(n, f, ho, wo)
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
        out = out + bias.data.reshape(1, f, 1, 1)

    xp_shape = xp.shape
    w_shape = w.data.shape

    def grad_fn(g):
        g2 = g.reshape(n, f, ho * wo)
        gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        gcols2 = np.matmul(w2.T[None], g2)
        gxp = _scatter_windows(
            gcols2.reshape(n, c, kh, kw, ho, wo), xp_shape, kh, kw, sh, sw, ho, wo
        )
        gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result("conv2d", out, parents, grad_fn)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-d input, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, wd = x.shape
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {kernel} does not fit input {x.shape}")
    _check_finite("maxpool2d", x)

    cols = _windows(x.data, kh, kw, sh, sw, ho, wo).reshape(n, c, kh * kw, ho, wo)
    arg = cols.argmax(axis=2)
    out = np.take_along_axis(cols, arg[:, :, None], axis=2)[:, :, 0]

    def grad_fn(g):
        gcols = np.zeros((n, c, kh * kw, ho, wo), dtype=g.dtype)
        np.put_along_axis(gcols, arg[:, :, None], g[:, :, None], axis=2)
        return (
            _scatter_windows(
                gcols.reshape(n, c, kh, kw, ho, wo), x.data.shape, kh, kw, sh, sw, ho, wo
            ),
        )

    return _result("maxpool2d", out, (x,), grad_fn)


def avgpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: need 4-d input, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, h, wd = x.shape
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"avgpool2d: window {kernel} does not fit input {x.shape}")
    _check_finite("avgpool2d", x)

    cols = _windows(x.data, kh, kw, sh, sw, ho, wo)
    out = cols.mean(axis=(2, 3))
    k = kh * kw

    def grad_fn(g):
        gcols = np.broadcast_to(
            (g / k)[:, :, None, None], (n, c, kh, kw, ho, wo)
        ).astype(g.dtype, copy=True)
        return (_scatter_windows(gcols, x.data.shape, kh, kw, sh, sw, ho, wo),)

    return _result("avgpool2d", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_running: bool = False,
):
    """Channel-wise batch normalization over a (N, C, H, W) tensor.

    Training mode normalizes with the batch's population statistics and, when
    ``update_running`` is set, folds them into the running buffers with the
    given momentum. Eval mode normalizes with the running buffers. Returns
    ``(out, batch_mean, batch_std)``; the stats are detached copies (None in
    eval mode).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: need 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    _check_finite("batchnorm2d", x, gamma, beta)

    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # population variance
        ivar = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)
        if update_running:
            running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
            running_var[:] = (1.0 - momentum) * running_var + momentum * var
        stats = (mu.copy(), np.sqrt(var))

        def grad_fn(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd
            s1 = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = ivar.reshape(1, c, 1, 1) * (dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        ivar = 1.0 / np.sqrt(running_var + np.asarray(eps, dtype=x.dtype))
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gd * xhat + beta.data.reshape(1, c, 1, 1)
        stats = None

        def grad_fn(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * gd * ivar.reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    return _result("batchnorm2d", out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn), stats


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean of a (N, C, H, W) tensor over (N, H, W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_mean: need 4-d input, got {x.shape}")
    _check_finite("channel_mean", x)
    n, c, h, w = x.shape
    m = n * h * w
    shape = x.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(1, c, 1, 1) / m, shape).astype(g.dtype, copy=True),)

    return _result("channel_mean", x.data.mean(axis=(0, 2, 3)), (x,), grad_fn)


def channel_std(x: Tensor) -> Tensor:
    """Per-channel population standard deviation over (N, H, W).

    d(sigma_c)/dx_i = (x_i - mu_c) / (m * sigma_c); the denominator is clamped
    to avoid a zero division on exactly-constant channels (the subgradient 0
    is used there).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"channel_std: need 4-d input, got {x.shape}")
    _check_finite("channel_std", x)
    n, c, h, w = x.shape
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    diff = x.data - mu.reshape(1, c, 1, 1)
    sigma = np.sqrt((diff * diff).mean(axis=(0, 2, 3)))

    def grad_fn(g):
        denom = np.maximum(m * sigma, np.finfo(g.dtype).tiny).reshape(1, c, 1, 1)
        return (g.reshape(1, c, 1, 1) * diff / denom,)

    return _result("channel_std", sigma, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape}, expected ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"softmax_cross_entropy: label out of range [0, {k})")
    _check_finite("softmax_cross_entropy", logits)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean(dtype=logits.dtype)

    def grad_fn(g):
        gd = p.copy()
        gd[np.arange(n), labels] -= 1.0
        return (g * gd / n,)

    return _result("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    _check_finite("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return _result("mse", np.asarray((diff * diff).mean(dtype=pred.dtype), dtype=pred.dtype), (pred, target), grad_fn)
