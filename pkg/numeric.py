# numeric.py
# Dense tensor engine: numpy-backed values, reverse-mode differentiation over a
# recorded tape, the kernels the model needs, and a finite-difference checker.

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from errors import ConfigError, DimensionError, NumericError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = {"dtype": np.float64, "grad_enabled": True}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(name):
    if name not in _DTYPES:
        raise ConfigError(f"Unknown dtype '{name}' (expected one of {sorted(_DTYPES)})")
    _state["dtype"] = _DTYPES[name]


@contextmanager
def precision(name):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _state["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad():
    """Evaluate without recording the tape (evaluation / frozen prefixes)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


class Tensor:
    """An n-dimensional array with optional gradient tracking.

    Leaves created by the user accumulate ``grad`` during ``backward``.
    Interior tensors keep a reference to their parents and a closure that
    maps the incoming gradient to one gradient per parent.
    """

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        _check_finite(data, op)
        tracked = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward_fn = backward_fn if tracked else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        ComputationTape.record(self).backward(grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def parameter(array, name=None):
    return Tensor(array, requires_grad=True, name=name)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"Non-finite value produced by '{op}'")


def _unbroadcast(grad, shape):
    """Sum out the axes numpy broadcasting added so grad matches shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class ComputationTape:
    """Reverse topological replay of the operations that produced a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, grad=None):
        root = self.nodes[-1]
        if grad is None:
            if root.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {root.shape}")
            grad = np.ones_like(root.data)
        pending = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor=None):
    """Natural log; values below ``floor`` are clamped and pass no gradient."""
    a = as_tensor(a)
    x = a.data if floor is None else np.maximum(a.data, floor)
    mask = 1.0 if floor is None else (a.data >= floor)

    def backward(g):
        return (g * mask / x,)

    return Tensor._from_op(np.log(x), (a,), backward, "log")


def sigmoid(a):
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh form."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out, (a,), backward, "gelu")


def identity(a):
    return as_tensor(a)


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {a.shape}")
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def global_avg_pool(a, axes):
    """Average over the given axes (e.g. (T, H, W) of a feature volume)."""
    return mean(a, axis=axes)


def softmax(a, axis=-1):
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine with gamma/beta."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        g_gamma = _unbroadcast(g * xhat, gamma.shape)
        g_beta = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = (inv_std / n) * (n * gx_hat
                              - gx_hat.sum(axis=-1, keepdims=True)
                              - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return Tensor._from_op(out, (a, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """x @ weight^T + bias with weight stored (out, in).

    A 1-D ``x`` is treated as a single row and the result is a 1-D vector.
    """
    x = as_tensor(x)
    if x.ndim == 1:
        out = matmul(reshape(x, (1, x.shape[0])), transpose(weight, None))
        out = reshape(out, (out.shape[-1],))
    else:
        out = matmul(x, transpose(weight, None))
    return out if bias is None else add(out, bias)


# ------------------------------------------------------------------ reshaping

def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from e
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = np.asarray(a.data[index])

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._from_op(out.copy(), (a,), backward, "getitem")


def embedding(table, indices):
    """Row lookup table[indices]; repeated indices accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range for table of shape {table.shape}")
    return getitem(table, idx)


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tuple(tensors), backward, "stack")


# -------------------------------------------------------------------- conv3d

def conv3d(x, kernels, bias=None, stride=(1, 1, 1), padding=1):
    """Cross-correlation over (T, H, W).

    x: (C_in, T, H, W) or (B, C_in, T, H, W); kernels: (C_out, C_in, kt, kh, kw).
    Computed as one tensordot per kernel offset over strided views of the
    padded input, so no im2col buffer is materialized.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or min(stride) < 1:
        raise ConfigError(f"conv3d stride must be three integers >= 1, got {stride}")
    batched = x.ndim == 5
    if x.ndim not in (4, 5) or kernels.ndim != 5:
        raise DimensionError(f"conv3d expects (C,T,H,W) input and 5-D kernels, got {x.shape} and {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c, t, h, w = xd.shape
    c_out, c_in, kt, kh, kw = kernels.shape
    if c_in != c:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    p = int(padding)
    if t + 2 * p < kt or h + 2 * p < kh or w + 2 * p < kw:
        raise DimensionError(f"conv3d kernel {kernels.shape[2:]} larger than padded input {(t, h, w)} (pad {p})")
    st, sh, sw = stride
    to = (t + 2 * p - kt) // st + 1
    ho = (h + 2 * p - kh) // sh + 1
    wo = (w + 2 * p - kw) // sw + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    wd = kernels.data

    def window(arr, dt, dh, dw):
        return arr[:, :, dt:dt + st * (to - 1) + 1:st, dh:dh + sh * (ho - 1) + 1:sh,
                   dw:dw + sw * (wo - 1) + 1:sw]

    offsets = [(dt, dh, dw) for dt in range(kt) for dh in range(kh) for dw in range(kw)]
    acc = np.zeros((c_out, n, to, ho, wo), dtype=xd.dtype)
    for dt, dh, dw in offsets:
        acc += np.tensordot(wd[:, :, dt, dh, dw], window(xp, dt, dh, dw), axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1)
    parents = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)
        parents = parents + (bias,)
    if not batched:
        out = out[0]

    def backward(g):
        g5 = g if batched else g[None]
        g_o = np.moveaxis(g5, 1, 0)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if kernels.requires_grad else None
        for dt, dh, dw in offsets:
            if gw is not None:
                gw[:, :, dt, dh, dw] = np.tensordot(g_o, window(xp, dt, dh, dw), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            if gxp is not None:
                contrib = np.tensordot(wd[:, :, dt, dh, dw], g_o, axes=([0], [0]))
                window(gxp, dt, dh, dw)[...] += np.moveaxis(contrib, 0, 1)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p:p + t, p:p + h, p:p + w]
            gx = gx if batched else gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g5.sum(axis=(0, 2, 3, 4)),)
        return grads

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward, "conv3d")


# ------------------------------------------------------------ gradient check

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps=1e-5,
               max_coords_per_param=20, rng=None, exclude=None):
    """Largest relative error between tape gradients and central differences.

    ``f`` re-evaluates a scalar from the current values of ``params``. Up to
    ``max_coords_per_param`` coordinates of each parameter are sampled.
    Relative error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).

    ``exclude`` maps a tensor name to flat coordinates that are never
    sampled, for coordinates whose true gradient is identically zero.
    """
    params = list(params)
    exclude = exclude or {}
    for prm in params:
        if prm.dtype != np.float64:
            raise ConfigError("grad_check requires 64-bit tensors")
        prm.zero_grad()
    rng = rng if rng is not None else np.random.default_rng(0)

    def evaluate():
        value = f()
        scalar = float(np.sum(value.data))
        if not math.isfinite(scalar):
            raise NumericError("grad_check objective is not finite")
        return value, scalar

    with _grad_enabled():
        value, _ = evaluate()
        value.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for prm, g_ad in zip(params, analytic):
            flat = prm.data.reshape(-1)
            candidates = np.arange(flat.size)
            if prm.name in exclude:
                candidates = np.setdiff1d(candidates, np.asarray(exclude[prm.name]))
            n = candidates.size
            coords = candidates if n <= max_coords_per_param else \
                rng.choice(candidates, max_coords_per_param, replace=False)
            for i in coords:
                original = flat[i]
                flat[i] = original + eps
                _, up = evaluate()
                flat[i] = original - eps
                _, down = evaluate()
                flat[i] = original
                g_fd = (up - down) / (2 * eps)
                g = g_ad.reshape(-1)[i]
                worst = max(worst, abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd)))
    for prm in params:
        prm.zero_grad()
    return worst


@contextmanager
def _grad_enabled():
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = True
    try:
        yield
    finally:
        _state["grad_enabled"] = previous
