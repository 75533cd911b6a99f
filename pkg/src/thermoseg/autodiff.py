"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is recorded on the fly: any op whose inputs need gradients stores
its parent tensors plus a closure that pushes the adjoint to them. `backward`
replays the closures in reverse topological order, so every recorded op is
visited exactly once and every reachable tensor with `requires_grad` ends up
with a populated `grad`.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import config

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording; inference and benchmarking fast path."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense N-d array plus the bookkeeping for reverse-mode autodiff.

    Tensors are treated as immutable once created: ops never write into an
    input's `data`. Only the optimizer mutates `Parameter.data`, between
    graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_needs_grad", "momentum_buf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=config.dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._needs_grad = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))


class Parameter(Tensor):
    """Trainable tensor with the SGD momentum buffer attached."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.momentum_buf = np.zeros_like(self.data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching the graph node if recording is on."""
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._needs_grad = True
    return out


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Add `grad` into `t.grad`, allocating on first touch."""
    if not t._needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor reachable from a scalar `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Iterative post-order over parents; each node appears once.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are not broadcastable") from None

    def bw(g):
        accumulate(a, unbroadcast(g, a.shape))
        accumulate(b, unbroadcast(g, b.shape))

    return record(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable") from None

    def bw(g):
        accumulate(a, unbroadcast(g * b.data, a.shape))
        accumulate(b, unbroadcast(g * a.data, b.shape))

    return record(data, (a, b), bw)


def elementwise(a, b, op: str) -> Tensor:
    """Dispatch {mul|add}; `b` may be per-channel [C] against NCHW `a`."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1 and a.ndim == 4:
        b = reshape(b, (1, b.shape[0], 1, 1))
    if op == "mul":
        return mul(a, b)
    if op == "add":
        return add(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def bw(g):
        accumulate(x, g * (x.data > 0))

    return record(data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # piecewise form avoids overflow in exp for large |x|
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    data = data.astype(d.dtype, copy=False)

    def bw(g):
        accumulate(x, g * data * (1.0 - data))

    return record(data, (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def bw(g):
        accumulate(x, g.reshape(x.shape))

    return record(data, (x,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            accumulate(t, g[tuple(index)])
            offset += size

    return record(data, tuple(tensors), bw)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum())

    def bw(g):
        accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return record(data, (x,), bw)


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over H, W with keepdims; the global-average-pool primitive."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"spatial_mean expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g):
        accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return record(data, (x,), bw)
