"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation creates a new :class:`Tensor` carrying a node id drawn from a
global increasing counter. Parents are always created before their children,
so sorting the reachable nodes by id gives a valid topological order; that
sorted list is the computation record walked by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an operation receives incompatible operand shapes."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results never require gradients."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("value", "_grad", "requires_grad", "parents", "backward_fn", "op", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(value)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _record(a.value * b.value, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value

    def backward(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _record(out, (a, b), backward, "div")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.value)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.value > 0, 1.0, slope)
    return _record(x.value * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def cube(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.value * x.value * x.value, (x,), lambda g: (3.0 * g * x.value * x.value,), "cube")


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def round_(x) -> Tensor:
    """Nearest integer, ties away from zero. Treated as a constant: zero gradient."""
    x = as_tensor(x)
    return _record(round_half_away(x.value), (x,), lambda g: (np.zeros_like(g),), "round")


def log2(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log2(x.value), (x,), lambda g: (g / (x.value * np.log(2.0)),), "log2")


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` composed from primitives (relu via leaky_relu with slope 0)."""
    x = as_tensor(x)
    return add(x, leaky_relu(sub(floor, x), slope=0.0))


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.value.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(out, (x,), backward, "mean")


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward, "matmul")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = np.argsort(axes)
    return _record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def slice_(x, index) -> Tensor:
    """Basic or integer-array indexing. Array indices may repeat (gather)."""
    x = as_tensor(x)
    try:
        out = x.value[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    out = np.array(out, dtype=np.float64, copy=True)
    fancy = _is_fancy(index)

    def backward(g):
        if fancy:
            flat = np.arange(x.size).reshape(x.shape)[index]
            grad = np.bincount(flat.ravel(), weights=g.ravel(), minlength=x.size)
            return (grad.reshape(x.shape),)
        grad = np.zeros_like(x.value)
        grad[index] = g
        return (grad,)

    return _record(out, (x,), backward, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, backward, "concat")


def avg_pool2x2(x) -> Tensor:
    """Non-overlapping 2x2 mean over the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial extent {(h, w)} must be even")
    lead = x.shape[:-2]
    out = x.value.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * 0.25,)

    return _record(out, (x,), backward, "avg_pool2x2")


# ---------------------------------------------------------------- convolution


def _pad_value(v: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0 or mode == "valid":
        return v
    width = [(0, 0)] * (v.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(v, width, mode="symmetric" if mode == "symmetric" else "constant")


def _unpad_grad(g: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0 or mode == "valid":
        return g
    for axis in (-2, -1):
        n = g.shape[axis] - 2 * pad
        core = np.take(g, np.arange(pad, pad + n), axis=axis)
        if mode == "symmetric":
            core = core.copy()
            for k in range(pad):
                idx_lo = [slice(None)] * g.ndim
                idx_hi = [slice(None)] * g.ndim
                src_lo = [slice(None)] * g.ndim
                src_hi = [slice(None)] * g.ndim
                idx_lo[axis] = pad - 1 - k
                src_lo[axis] = k
                idx_hi[axis] = n - 1 - k
                src_hi[axis] = n + pad + k
                core[tuple(idx_lo)] += g[tuple(src_lo)]
                core[tuple(idx_hi)] += g[tuple(src_hi)]
        g = core
    return g


def conv2d(x, weight, stride: int = 1, padding: str = "symmetric") -> Tensor:
    """2-D cross-correlation. ``x``: (N, C, H, W); ``weight``: (O, C, kh, kw).

    ``padding`` is ``"symmetric"`` (mirror, edge sample repeated), ``"zeros"`` or
    ``"valid"``. Padded modes add ``kh // 2`` samples on each side.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if padding not in ("symmetric", "zeros", "valid"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    kh, kw = weight.shape[2:]
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {weight.shape}")
    pad = 0 if padding == "valid" else kh // 2
    xp = _pad_value(x.value, pad, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = cols.shape[:4]
    # (N, Ho, Wo, C*kh*kw) patch matrix, kept for the weight gradient
    patches = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, -1)
    wmat = weight.value.reshape(weight.shape[0], -1)
    out = np.ascontiguousarray((patches @ wmat.T).transpose(0, 3, 1, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gw = (gt.reshape(-1, gt.shape[-1]).T @ patches.reshape(-1, patches.shape[-1])).reshape(weight.shape)
        if stride == 1:
            # full correlation of the output gradient with the flipped kernel
            gpad = np.pad(gt, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            gwin = sliding_window_view(gpad, (kh, kw), axis=(1, 2))  # N, Hp, Wp, O, kh, kw
            flipped = weight.value[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(-1, c)
            gwin = np.ascontiguousarray(gwin).reshape(n, xp.shape[2], xp.shape[3], -1)
            gxp = np.ascontiguousarray((gwin @ flipped).transpose(0, 3, 1, 2))
        else:
            gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
        return _unpad_grad(gxp, pad, padding), gw

    return _record(out, (x, weight), backward, "conv2d")


# ---------------------------------------------------------------- resampling


def bilinear_sample(image, coords) -> Tensor:
    """Sample ``image`` (C, H, W) at real coordinates ``coords`` (..., 2) given as (row, col).

    Coordinates are clamped to the image extent (edge replication); the
    gradient with respect to a clamped coordinate component is zero.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    if image.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: image {image.shape} / coords {coords.shape}")
    c, h, w = image.shape
    ys, xs = coords.value[..., 0], coords.value[..., 1]
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    img = image.value
    v00, v01 = img[:, y0, x0], img[:, y0, x1]
    v10, v11 = img[:, y1, x0], img[:, y1, x1]
    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    out = top * (1 - wy) + bottom * wy
    inside_y = (ys >= 0) & (ys <= h - 1)
    inside_x = (xs >= 0) & (xs <= w - 1)

    def backward(g):
        gimg = np.zeros((c, h * w))
        for yy, xx, weight in (
            (y0, x0, (1 - wy) * (1 - wx)),
            (y0, x1, (1 - wy) * wx),
            (y1, x0, wy * (1 - wx)),
            (y1, x1, wy * wx),
        ):
            flat = (yy * w + xx).ravel()
            for ch in range(c):
                gimg[ch] += np.bincount(flat, weights=(g[ch] * weight).ravel(), minlength=h * w)
        dy = ((bottom - top) * g).sum(axis=0) * inside_y
        dx = (((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * g).sum(axis=0) * inside_x
        return gimg.reshape(c, h, w), np.stack([dy, dx], axis=-1)

    return _record(out, (image, coords), backward, "bilinear_sample")


# ---------------------------------------------------------------- normalization


class BatchNormState:
    """Running statistics for one batch-norm layer (frozen-statistics mode)."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N, C, H, W) input."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = state.momentum
        count = x.size / x.shape[1]
        state.mean = (1 - m) * state.mean + m * mu
        state.var = (1 - m) * state.var + m * var * count / max(count - 1, 1)
    else:
        mu, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.value[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if training:
            m = x.size / x.shape[1]
            gx = scale / m * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * scale
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "avg_pool2x2": avg_pool2x2,
    "bilinear_sample": bilinear_sample,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "abs": abs_,
    "square": square,
    "cube": cube,
    "round": round_,
    "sum": sum_,
    "mean": mean,
    "log2": log2,
    "batch_norm": batch_norm,
}


def primitive_forward(kind: str, inputs: Sequence, **attributes) -> Tensor:
    """Apply primitive ``kind`` by name. Attributes are passed as keywords."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attributes)
    return fn(*inputs, **attributes)


# ---------------------------------------------------------------- backward pass


def computation_record(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that require gradients, in topological order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in seen or not node.requires_grad:
            continue
        seen[node.node_id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from scalar ``loss``.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    record = computation_record(loss)
    for node in record:
        node._grad = np.zeros_like(node.value)
    if not record:
        return
    loss._grad = np.ones_like(loss.value)
    for node in reversed(record):
        if node.backward_fn is None:
            continue
        grads = node.backward_fn(node._grad)
        for parent, g in zip(node.parents, grads):
            if parent.requires_grad and g is not None:
                parent._grad = parent._grad + g


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Max relative disagreement between the analytic gradient and central differences."""
    base = np.array(as_tensor(x).value, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad.ravel()
    numeric = np.empty_like(analytic)
    with no_grad():
        flat = base.ravel()
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            numeric[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
