"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each op computes its value eagerly with numpy and stores a closure mapping the
upstream gradient to one gradient per parent. ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients into leaf
tensors that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True

# arccos is evaluated on [-1 + eps, 1 - eps] so its derivative stays finite.
ARCCOS_EPS = 1e-7


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# elementwise unary ops

def _unary(x, value, dvalue, op):
    x = as_tensor(x)
    out = value(x.data)
    return _make(out, (x,), lambda g: (g * dvalue(x.data, out),), op)


def abs_(x) -> Tensor:
    return _unary(x, np.abs, lambda v, o: np.sign(v), "abs")


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, o: 2.0 * v, "square")


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o, "sqrt")


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda v, o: np.cos(v), "sin")


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda v, o: -np.sin(v), "cos")


def arccos(x) -> Tensor:
    """arccos of ``x`` clipped to [-1, 1].

    The derivative is evaluated at ``x`` clamped to [-1 + 1e-7, 1 - 1e-7], so
    it stays finite at the boundary while the value keeps arccos(1) == 0.
    """

    def dvalue(v, o):
        vc = np.clip(v, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
        return -1.0 / np.sqrt(1.0 - vc * vc)

    return _unary(x, lambda v: np.arccos(np.clip(v, -1.0, 1.0)), dvalue, "arccos")


def sigmoid(x) -> Tensor:
    def value(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    return _unary(x, value, lambda v, o: o * (1.0 - o), "sigmoid")


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    return _unary(x, lambda v: np.where(v > 0, v, slope * v),
                  lambda v, o: np.where(v > 0, 1.0, slope), "leaky_relu")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


# reductions and shape ops

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref))
                                     if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, _insert_axis(t.shape, axis)) for t in tensors]
    return concat(expanded, axis=axis)


def _insert_axis(shape, axis):
    shape = list(shape)
    if axis < 0:
        axis = len(shape) + 1 + axis
    shape.insert(axis, 1)
    return tuple(shape)


def depth_to_space(x, r: int = 2) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r), channel-major sub-pixel layout."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"depth_to_space: channels {c} not divisible by {r * r}")
    oc = c // (r * r)
    out = x.data.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)

    def backward(g):
        return (g.reshape(n, oc, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _make(out, (x,), backward, "depth_to_space")


# convolution and windowed statistics

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    # im2col in channels-last order so each kernel tap is a contiguous block
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
    xp[:, padding:padding + h, padding:padding + wd, :] = x.data.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + wd, :].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def window_mean(x, kernel) -> Tensor:
    """Weighted mean over every valid k x k window of the last two axes.

    ``kernel`` is a 1-D weight vector summing to one; the 2-D window weights
    are its outer product.
    """
    x = as_tensor(x)
    k = np.asarray(kernel, dtype=np.float64)
    n = k.size
    if x.shape[-1] < n or x.shape[-2] < n:
        raise ShapeError(f"window_mean: input {x.shape} smaller than {n}x{n} window")
    rows = sliding_window_view(x.data, n, axis=-1) @ k
    out = sliding_window_view(rows, n, axis=-2) @ k
    ho, wo = out.shape[-2], out.shape[-1]

    def backward(g):
        # adjoint of a valid correlation: full correlation with the reversed kernel
        pad = [(0, 0)] * (g.ndim - 2)
        gp = np.pad(g, pad + [(n - 1, n - 1), (0, 0)])
        grows = sliding_window_view(gp, n, axis=-2) @ k[::-1]
        gp = np.pad(grows, pad + [(0, 0), (n - 1, n - 1)])
        return (sliding_window_view(gp, n, axis=-1) @ k[::-1],)

    return _make(out, (x,), backward, "window_mean")


def window_var(x, kernel) -> Tensor:
    mu = window_mean(x, kernel)
    return window_mean(square(x), kernel) - square(mu)


def window_cov(x, y, kernel) -> Tensor:
    return window_mean(mul(x, y), kernel) - window_mean(x, kernel) * window_mean(y, kernel)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix for half-pixel-centred bilinear resampling."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x, size: int) -> Tensor:
    """Resize the last two axes to ``size`` x ``size``."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (size, size):
        return x
    rh, rw = bilinear_matrix(h, size), bilinear_matrix(w, size)
    out = rh @ x.data @ rw.T
    return _make(out, (x,), lambda g: (rh.T @ g @ rw,), "resize_bilinear")
