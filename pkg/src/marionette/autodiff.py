"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the MLPs used in this project: matmul, bias
broadcast, ELU/ReLU, layer normalization (built from primitives), embedding
row gather, clamping, and the usual elementwise/reduction ops. Gradients
accumulate into ``Tensor.grad`` (plain ndarrays) when ``backward`` is called
on a scalar loss.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradError",
    "backward",
    "matmul",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "power",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "elu",
    "tanh",
    "minimum",
    "clamp",
    "total",
    "mean_all",
    "mean_last",
    "mean_rows",
    "sum_last",
    "reshape",
    "concat",
    "gather_rows",
    "transpose",
]


class GradError(ValueError):
    """Raised when a loss graph cannot be differentiated (bad shapes, NaNs)."""


class Tensor:
    """A float64 array plus the tape hooks needed for reverse mode.

    ``requires_grad`` marks leaves (parameters). Interior nodes record their
    parents and a closure that distributes an incoming cotangent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_push")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._push = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def _node(data, parents, push):
    out = Tensor(data)
    if any(p.requires_grad or p._push is not None for p in parents):
        out._parents = tuple(parents)
        out._push = push
        out.requires_grad = True
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss node.

    Rejects non-scalar or non-finite losses before touching any gradient,
    so a NaN surfacing in a loss is caught at the evaluation site.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise GradError("non-finite loss; refusing to compute gradients")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node._push is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in node._push(g):
            if parent._push is None:
                if parent.requires_grad:
                    _accum(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64, copy=True)


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to the original operand shape
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[0]:
        raise GradError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def push(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _node(out, (a, b), push)


def matmul_t(a, b):
    """a @ b.T without materializing a transposed Tensor."""
    if a.data.shape[-1] != b.data.shape[-1]:
        raise GradError(f"matmul_t shape mismatch: {a.data.shape} @ {b.data.shape}.T")
    out = a.data @ b.data.T

    def push(g):
        return ((a, g @ b.data), (b, g.T @ a.data))

    return _node(out, (a, b), push)


def add(a, b):
    out = a.data + b.data

    def push(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _node(out, (a, b), push)


def sub(a, b):
    out = a.data - b.data

    def push(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _node(out, (a, b), push)


def mul(a, b):
    out = a.data * b.data

    def push(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _node(out, (a, b), push)


def div(a, b):
    out = a.data / b.data

    def push(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return _node(out, (a, b), push)


def scale(a, k):
    k = float(k)

    def push(g):
        return ((a, g * k),)

    return _node(a.data * k, (a,), push)


def neg(a):
    return scale(a, -1.0)


def power(a, p):
    p = float(p)
    out = a.data**p

    def push(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _node(out, (a,), push)


def exp(a):
    out = np.exp(a.data)

    def push(g):
        return ((a, g * out),)

    return _node(out, (a,), push)


def log(a):
    out = np.log(a.data)

    def push(g):
        return ((a, g / a.data),)

    return _node(out, (a,), push)


def sqrt(a):
    out = np.sqrt(a.data)

    def push(g):
        return ((a, g * (0.5 / out)),)

    return _node(out, (a,), push)


def relu(a):
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def push(g):
        return ((a, g * mask),)

    return _node(out, (a,), push)


def elu(a):
    # elu(x) = x for x >= 0, e^x - 1 otherwise
    pos = a.data >= 0.0
    expx = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, expx - 1.0)

    def push(g):
        return ((a, g * np.where(pos, 1.0, expx)),)

    return _node(out, (a,), push)


def tanh(a):
    out = np.tanh(a.data)

    def push(g):
        return ((a, g * (1.0 - out * out)),)

    return _node(out, (a,), push)


def minimum(a, b):
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def push(g):
        return (
            (a, _unbroadcast(g * take_a, a.data.shape)),
            (b, _unbroadcast(g * ~take_a, b.data.shape)),
        )

    return _node(out, (a, b), push)


def clamp(a, lo, hi):
    """Clamp with pass-through gradient inside [lo, hi], zero outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def push(g):
        return ((a, g * inside),)

    return _node(out, (a,), push)


def total(a):
    out = np.array(a.data.sum())

    def push(g):
        return ((a, np.broadcast_to(g, a.data.shape)),)

    return _node(out, (a,), push)


def mean_all(a):
    n = a.data.size
    out = np.array(a.data.mean())

    def push(g):
        return ((a, np.broadcast_to(g / n, a.data.shape)),)

    return _node(out, (a,), push)


def sum_last(a):
    out = a.data.sum(axis=-1, keepdims=True)

    def push(g):
        return ((a, np.broadcast_to(g, a.data.shape)),)

    return _node(out, (a,), push)


def mean_last(a):
    n = a.data.shape[-1]
    out = a.data.mean(axis=-1, keepdims=True)

    def push(g):
        return ((a, np.broadcast_to(g / n, a.data.shape)),)

    return _node(out, (a,), push)


def mean_rows(a):
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def push(g):
        return ((a, np.broadcast_to(g / n, a.data.shape)),)

    return _node(out, (a,), push)


def reshape(a, shape):
    old_shape = a.data.shape

    def push(g):
        return ((a, g.reshape(old_shape)),)

    return _node(a.data.reshape(shape), (a,), push)


def concat(parts, axis=-1):
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def push(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(parts, pieces))

    return _node(out, tuple(parts), push)


def gather_rows(table, idx):
    """Select rows of a 2-D parameter table; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = table.data[idx]

    def push(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return ((table, acc),)

    return _node(out, (table,), push)


def transpose(a):
    def push(g):
        return ((a, g.T),)

    return _node(a.data.T, (a,), push)
