"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value is a (rows, cols) matrix; scalars are 1x1. An operation returns
a new Tensor that doubles as the tape node: it keeps references to its input
tensors and a closure that maps the output adjoint to input adjoints.
``backward(loss)`` walks the reachable graph once in reverse topological
order and adds d(loss)/d(t) into ``t.grad`` for every tensor that requires
gradients, so repeated calls accumulate.

Broadcasting is deliberately restricted: ``add`` accepts a 1 x n row vector
against an m x n matrix (bias addition) and nothing else, which keeps every
backward rule a one-liner. All arithmetic is float64.

A graph is single-threaded. The recording switch used by ``no_grad`` is
thread-local, so independent graphs may run on different threads.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (outputs won't require grad)."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    """A 2-D float64 array with an optional same-shape gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_bwd")

    def __init__(self, values, requires_grad=False, *, op="leaf", parents=(), bwd=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D matrices; got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = op
        self._parents = tuple(parents)
        self._bwd = bwd

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @staticmethod
    def scalar(value, requires_grad=False) -> "Tensor":
        return Tensor([[float(value)]], requires_grad)

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a 1x1 tensor; got shape {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        """Copy of the values with no gradient tracking and no tape edge."""
        return Tensor(self.values.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _make(values: np.ndarray, op: str, parents: tuple, bwd) -> Tensor:
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite output in op '{op}'")
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(values, True, op=op, parents=parents, bwd=bwd)
    return Tensor(values, False, op=op)


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; one operand may be a 1 x n row vector (bias)."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        def bwd(g):
            return g.sum(axis=0, keepdims=True), g
    elif b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        def bwd(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        raise ShapeError(
            f"add: shapes {a.shape} and {b.shape} are neither equal nor row-broadcastable"
        )
    return _make(a.values + b.values, "add", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values

    def bwd(g):
        return g * bv, g * av

    return _make(av * bv, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.values, "neg", (a,), bwd)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid on a plain array (branch form: only ever
    exponentiates a non-positive argument)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_values(a.values)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _make(s, "sigmoid", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return _make(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)

    def bwd(g):
        return (g / av,)

    return _make(out, "log", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) to avoid overflow."""
    av = a.values
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = sigmoid_values(av)

    def bwd(g):
        return (g * sig,)

    return _make(out, "softplus", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    av = a.values
    mask = av > 0

    def bwd(g):
        return (g * mask,)

    return _make(np.maximum(av, 0.0), "relu", (a,), bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.values, b.values], axis=1), "concat_cols", (a, b), bwd)


def row_gather(table: Tensor, indices) -> Tensor:
    """Select rows of ``table``; backward scatter-adds into the table grad."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)][0]
        raise UsageError(f"row_gather: index {bad} out of range for table with {rows} rows")
    tv = table.values

    def bwd(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(tv[idx], "row_gather", (table,), bwd)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g[0, 0]),)

    return _make(np.array([[a.values.sum()]]), "reduce_sum", (a,), bwd)


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.values.size
    if n == 0:
        raise ShapeError("reduce_mean of an empty tensor")

    def bwd(g):
        return (np.full(shape, g[0, 0] / n),)

    return _make(np.array([[a.values.mean()]]), "reduce_mean", (a,), bwd)


def row_softmax(a: Tensor) -> Tensor:
    av = a.values
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, "row_softmax", (a,), bwd)


def scalar_scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.values * c, "scalar_scale", (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    ``loss`` must be 1x1. Tensors not on a path to the loss keep their grads
    untouched; calling twice adds the gradients twice.
    """
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a 1x1 scalar loss; got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward on a tensor with requires_grad=False")

    # iterative post-order DFS over grad-requiring parents
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._bwd is None:
            continue
        for parent, contrib in zip(node._parents, node._bwd(g)):
            if contrib is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                # never mutate in place: contributions may alias each other
                adjoint[pid] = adjoint[pid] + contrib
            else:
                adjoint[pid] = contrib
