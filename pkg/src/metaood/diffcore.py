"""Reverse-mode autodiff over dense float64 arrays.

Provides exactly the primitives the episodic training pipeline needs:
matrix products, a handful of elementwise functions, stable reductions,
and differentiable Cholesky / triangular solves. Operations record onto
the thread-local active ``Tape``; ``backward`` replays the tape in exact
reverse execution order and accumulates gradients into the leaves.

Everything is computed in 64-bit. Any op whose result contains NaN/Inf
raises ``NonFiniteError`` immediately instead of letting the poison
propagate, so failed training steps stay diagnosable.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular


class DiffError(Exception):
    """Base class for errors raised by this module."""


class ShapeMismatchError(DiffError):
    pass


class DomainError(DiffError):
    """Input outside an op's mathematical domain (e.g. log of x <= 0)."""


class NonFiniteError(DiffError):
    """An op produced NaN or Inf."""


class NotPositiveDefiniteError(DiffError):
    """Cholesky hit a non-positive pivot.

    ``pivot`` is the 0-based index of the failing pivot.
    """

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: "Array", inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops for one reverse sweep.

    Use as a context manager; ops executed inside record themselves when
    any input requires grad. Tapes are single-threaded; independent tapes
    may run on separate threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class Array:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("array initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routed through the module-level ops.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Array":
        return transpose(self)


def as_array(x) -> Array:
    """Wrap scalars/ndarrays as constant Arrays; pass Arrays through."""
    if isinstance(x, Array):
        return x
    return Array(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")


def _make(data: np.ndarray, op: str, inputs: tuple, vjp: Callable) -> Array:
    """Build the output array and record the op if gradients are live."""
    _check_finite(data, op)
    out = Array.__new__(Array)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss: Array, leaves: Iterable[Array] | None = None) -> None:
    """Reverse sweep from a scalar loss.

    Sets ``.grad`` on every requires-grad leaf the tape saw; leaves that
    never influence the loss get an explicit zero gradient. Gradients of
    a node used by several consumers accumulate by summation. Pass
    ``leaves`` to also zero-fill parameters the graph never touched.
    """
    if loss.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise DiffError("loss was not recorded on any tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaf_map: dict[int, Array] = {}
    for node in tape._nodes:
        produced.add(id(node.out))
    for node in tape._nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaf_map[id(inp)] = inp
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in produced:
                leaf_map.setdefault(id(leaf), leaf)

    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gin in zip(node.inputs, node.vjp(g)):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin

    for key, leaf in leaf_map.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), vjp)


def transpose(a) -> Array:
    a = as_array(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a 2-D array, got {a.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.data.T.copy(), "transpose", (a,), vjp)


def reshape(a, shape) -> Array:
    a = as_array(a)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape).copy(), "reshape", (a,), vjp)


def take_rows(a, idx) -> Array:
    """Gather rows of a 1-D or 2-D array; gradient scatter-adds."""
    a = as_array(a)
    if a.ndim not in (1, 2):
        raise ShapeMismatchError(f"take_rows needs a 1-D or 2-D array, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx].copy(), "take_rows", (a,), vjp)


def concat(arrays: Sequence, axis: int = 0) -> Array:
    arrs = [as_array(x) for x in arrays]
    if not arrs:
        raise ShapeMismatchError("concat of zero arrays")
    sizes = [a.shape[axis] for a in arrs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([a.data for a in arrs], axis=axis), "concat", tuple(arrs), vjp)


def tile_rows(a, n: int) -> Array:
    """Repeat a (1, F) row vector into an (n, F) matrix."""
    a = as_array(a)
    if a.ndim != 2 or a.shape[0] != 1:
        raise ShapeMismatchError(f"tile_rows needs shape (1, F), got {a.shape}")

    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)

    return _make(np.repeat(a.data, n, axis=0), "tile_rows", (a,), vjp)


def tile_cols(a, n: int) -> Array:
    """Repeat an (M, 1) column vector into an (M, n) matrix."""
    a = as_array(a)
    if a.ndim != 2 or a.shape[1] != 1:
        raise ShapeMismatchError(f"tile_cols needs shape (M, 1), got {a.shape}")

    def vjp(g):
        return (g.sum(axis=1, keepdims=True),)

    return _make(np.repeat(a.data, n, axis=1), "tile_cols", (a,), vjp)


def diag_part(a) -> Array:
    a = as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"diag_part needs a square matrix, got {a.shape}")

    def vjp(g):
        return (np.diag(g),)

    return _make(np.diag(a.data).copy(), "diag_part", (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise ops (equal shapes, or scalar-with-array)


def _binary(name: str, a, b, fwd, vjp_a, vjp_b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatchError(
            f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar"
        )
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(a.data, b.data)

    def _reduce(g, ref: Array):
        if ref.shape == g.shape:
            return g
        return g.sum().reshape(ref.shape)  # scalar operand broadcast over the other

    def vjp(g):
        return _reduce(vjp_a(g, a.data, b.data), a), _reduce(vjp_b(g, a.data, b.data), b)

    return _make(out, name, (a, b), vjp)


def add(a, b) -> Array:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Array:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Array:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Array:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a, c: float) -> Array:
    a = as_array(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make(a.data * c, "scale", (a,), vjp)


def _unary(name: str, a, fwd, dlocal) -> Array:
    a = as_array(a)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(a.data)

    def vjp(g):
        return (g * dlocal(a.data, out),)

    return _make(out, name, (a,), vjp)


def relu(a) -> Array:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda x, out: (x > 0.0).astype(np.float64))


def sigmoid(a) -> Array:
    def fwd(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda x, out: out * (1.0 - out))


def exp(a) -> Array:
    return _unary("exp", a, np.exp, lambda x, out: out)


def log(a) -> Array:
    a = as_array(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    return _unary("log", a, np.log, lambda x, out: 1.0 / x)


def sqrt(a) -> Array:
    a = as_array(a)
    if np.any(a.data <= 0.0):
        # gradient 0.5/sqrt(x) blows up at 0; callers clamp first
        raise DomainError("sqrt of non-positive input")
    return _unary("sqrt", a, np.sqrt, lambda x, out: 0.5 / out)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Array, axis):
    if axis is None:
        if a.size == 0:
            raise ShapeMismatchError("reduction over empty array")
        return
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatchError(f"axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeMismatchError(f"reduction over empty axis {axis} of shape {a.shape}")


def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def reduce_sum(a, axis=None) -> Array:
    a = as_array(a)
    _check_axis(a, axis)

    def vjp(g):
        return (_expand(g, a.shape, axis).copy(),)

    return _make(a.data.sum(axis=axis), "sum", (a,), vjp)


def reduce_mean(a, axis=None) -> Array:
    a = as_array(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]

    def vjp(g):
        return (_expand(g, a.shape, axis) / n,)

    return _make(a.data.mean(axis=axis), "mean", (a,), vjp)


def logsumexp(a, axis=None) -> Array:
    a = as_array(a)
    _check_axis(a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    full = np.log(total) + m
    out = full.reshape(()) if axis is None else np.squeeze(full, axis=axis)
    softmax = shifted / total

    def vjp(g):
        return (_expand(g, a.shape, axis) * softmax,)

    return _make(out, "logsumexp", (a,), vjp)


def reduce_min(a, axis=None) -> Array:
    """Minimum along an axis; subgradient routes to the first argmin."""
    a = as_array(a)
    _check_axis(a, axis)
    out = a.data.min(axis=axis)
    idx = a.data.argmin(axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if axis is None:
            ga.reshape(-1)[idx] = g
            return (ga,)
        gi = np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gi, axis=axis)
        return (ga,)

    return _make(out, "min", (a,), vjp)


# ---------------------------------------------------------------------------
# matrix factorizations


def _phi(x: np.ndarray) -> np.ndarray:
    """Lower triangle with the diagonal halved (Cholesky pullback helper)."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(s) -> Array:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises ``NotPositiveDefiniteError`` carrying the 0-based index of the
    failing pivot when the matrix is not PD.
    """
    s = as_array(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatchError(f"cholesky needs a square matrix, got {s.shape}")
    c, info = lapack.dpotrf(s.data, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite (pivot {info - 1})", pivot=info - 1
        )
    if info < 0:
        raise DiffError(f"cholesky: illegal argument {-info}")
    L = c

    def vjp(g):
        p = _phi(L.T @ g)
        x = solve_triangular(L, p, lower=True, trans="T")
        sbar = solve_triangular(L, x.T, lower=True, trans="T").T
        return (0.5 * (sbar + sbar.T),)

    return _make(L, "cholesky", (s,), vjp)


def trisolve(l, b) -> Array:
    """Solve L x = b for lower-triangular L; b is (D,) or (D, m)."""
    l, b = as_array(l), as_array(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeMismatchError(f"trisolve needs a square L, got {l.shape}")
    if b.shape[0] != l.shape[0]:
        raise ShapeMismatchError(f"trisolve: L {l.shape} vs b {b.shape}")
    if np.any(np.diag(l.data) == 0.0):
        raise DomainError("trisolve: zero diagonal entry in L")
    x = solve_triangular(l.data, b.data, lower=True)

    def vjp(g):
        bbar = solve_triangular(l.data, g, lower=True, trans="T")
        bb = bbar if bbar.ndim == 2 else bbar.reshape(-1, 1)
        xx = x if x.ndim == 2 else x.reshape(-1, 1)
        lbar = -np.tril(bb @ xx.T)
        return lbar, bbar

    return _make(x, "trisolve", (l, b), vjp)


__all__ = [
    "Array", "Tape", "backward", "as_array",
    "DiffError", "ShapeMismatchError", "DomainError", "NonFiniteError",
    "NotPositiveDefiniteError",
    "matmul", "transpose", "reshape", "take_rows", "concat",
    "tile_rows", "tile_cols", "diag_part",
    "add", "sub", "mul", "div", "scale",
    "relu", "sigmoid", "exp", "log", "sqrt",
    "reduce_sum", "reduce_mean", "logsumexp", "reduce_min",
    "cholesky", "trisolve",
]
