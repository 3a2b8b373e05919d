"""A small reverse-mode autodiff engine over numpy arrays.

Tensors wrap a contiguous ``float32`` (default) or ``float64`` array.  An op
whose inputs require gradients records a :class:`Node` holding its parents and
a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` orders the recorded nodes topologically (the tape) and runs
every closure exactly once.

Gradients accumulate into ``.grad`` of leaf tensors only; call
:func:`zero_grads` (or ``SGD.zero_grad``) between steps.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_local = threading.local()
DEBUG = os.environ.get("DAM_DEBUG", "") == "1"


def set_debug(flag: bool) -> None:
    """Enable finite-value checks after every op and label checks in losses."""
    global DEBUG
    DEBUG = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op}: non-finite output from finite inputs")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), grad_fn)
    return out


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered tensors reachable from ``loss`` through grad-carrying edges."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a, getattr(b, "dtype", None))
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), grad_fn, "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0  # subgradient 0 at 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# reductions and shape ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Anchored at the first element: ``x0 + sum(x - x0) / n``, accumulated in float64.

    Equal inputs therefore average to exactly themselves in any dtype.
    """
    d = x.data
    axes = tuple(range(d.ndim)) if axis is None else tuple(a % d.ndim for a in np.atleast_1d(axis))
    n = int(np.prod([d.shape[a] for a in axes]))
    shape = x.shape
    x0 = d[tuple(slice(0, 1) if i in axes else slice(None) for i in range(d.ndim))]
    out = (x0 + (d - x0).sum(axis=axes, keepdims=True, dtype=np.float64) / n).astype(d.dtype)
    if not keepdims:
        out = out.reshape([s for i, s in enumerate(out.shape) if i not in axes])

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).astype(d.dtype),)

    return _result(np.asarray(out), (x,), grad_fn, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    ref = xs[0].shape
    nd = len(ref)
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: ragged shapes {[t.shape for t in xs]} along axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), grad_fn, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    index = (slice(None),) * ax + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), grad_fn, "slice")


def split(x: Tensor, axis: int = 0, parts: int = 2) -> tuple[Tensor, ...]:
    """Split into ``parts`` equal pieces along ``axis``."""
    n = x.shape[axis]
    if n % parts:
        raise ValueError(f"split: axis {axis} of size {n} is not divisible into {parts} parts")
    step = n // parts
    return tuple(slice_axis(x, axis, i * step, (i + 1) * step) for i in range(parts))


# linear algebra -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast numpy-style."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), grad_fn, "matmul")


def l2_normalize(x: Tensor, axis: int = 0, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(sum(x**2, axis) + eps**2)``; smooth at the origin."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps * eps)
    y = x.data / n

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _result(y, (x,), grad_fn, "l2_normalize")
