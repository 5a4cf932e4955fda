"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is the implicit DAG of ``Tensor`` records: each op stores its parent
tensors and a closure mapping the output gradient to parent gradients.
``backward`` runs one reverse-topological pass and accumulates gradients on
every tensor that requires them.  There is no graph reuse: build, backprop,
throw away.

Ops follow numpy broadcasting; gradients are summed back to the parent shape.
All data is float64 and every op checks the result for finiteness so NaNs
fail loudly instead of propagating.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractViolation, NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} shape={self.data.shape} grad={self.requires_grad}>"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data, parents, backward_fn, name=None) -> Tensor:
    """Create the output tensor of an op; drops the tape when grads are off."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op {name!r}")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, parents=tuple(parents),
                  backward_fn=backward_fn, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological node order for the graph below ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating ``grad`` on the graph."""
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any differentiable tensor")
    loss.grad = np.ones_like(loss.data)
    for node in topo_order(loss):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return from_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return from_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return from_op(out, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return from_op(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # stable: log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bw(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return from_op(out, (a,), bw, "softplus")


# ---------------------------------------------------------------------------
# linear algebra / shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractViolation(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return from_op(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return from_op(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return from_op(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def expand(a, axis: int, n: int) -> Tensor:
    """Repeat a length-1 axis n times (backward sums over it)."""
    a = as_tensor(a)
    if a.data.shape[axis] != 1:
        raise ContractViolation(f"expand needs size-1 axis, got {a.data.shape}[{axis}]")
    reps = [1] * a.data.ndim
    reps[axis] = n
    out = np.tile(a.data, reps)
    return from_op(out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),), "expand")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(out, tuple(tensors), bw, "concat")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return from_op(out, (a,), bw, "slice")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return from_op(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape) / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape) / count,)

    return from_op(out, (a,), bw, "mean")


def sqnorm(a, axis=None) -> Tensor:
    """Sum of squared entries (over all axes or the given ones)."""
    a = as_tensor(a)
    out = (a.data * a.data).sum(axis=axis)

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (2.0 * a.data * gg,)

    return from_op(out, (a,), bw, "sqnorm")
