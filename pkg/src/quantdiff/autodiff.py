"""Minimal reverse-mode autodiff over numpy arrays.

``Var`` wraps an ndarray and records the operations applied to it; calling
:func:`backward` on a scalar result fills ``.grad`` on every participating
``Var``. The op helpers below dispatch on their arguments: if no operand is a
``Var`` they compute plain numpy, so the same forward code serves both the
fast untaped path and the taped path bit-identically.

Gradients are exact for the recorded computation (tests check them against
:func:`finite_diff_grad`). Discrete quantities (floors, rounding residuals)
must enter a taped computation as plain arrays, recomputed by the caller per
step; differentiating through them is deliberately unsupported.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError


class Var:
    """A node in the gradient tape: a value plus the vjp of its producer."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def value_of(x):
    """The plain ndarray behind ``x`` (identity for non-Var)."""
    return x.value if isinstance(x, Var) else x


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_var(a, b):
        return out

    def vjp(g):
        return (
            _unbroadcast(g, np.shape(av)) if isinstance(a, Var) else None,
            _unbroadcast(g, np.shape(bv)) if isinstance(b, Var) else None,
        )

    return Var(out, (a, b), vjp)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _is_var(a, b):
        return out

    def vjp(g):
        return (
            _unbroadcast(g, np.shape(av)) if isinstance(a, Var) else None,
            _unbroadcast(-g, np.shape(bv)) if isinstance(b, Var) else None,
        )

    return Var(out, (a, b), vjp)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_var(a, b):
        return out

    def vjp(g):
        return (
            _unbroadcast(g * bv, np.shape(av)) if isinstance(a, Var) else None,
            _unbroadcast(g * av, np.shape(bv)) if isinstance(b, Var) else None,
        )

    return Var(out, (a, b), vjp)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _is_var(a, b):
        return out

    def vjp(g):
        return (
            g @ bv.T if isinstance(a, Var) else None,
            av.T @ g if isinstance(b, Var) else None,
        )

    return Var(out, (a, b), vjp)


def affine(x, w, b):
    """x @ w.T + b for w of shape (out, in); fused for the training hot path."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv.T + bv
    if not _is_var(x, w, b):
        return out

    def vjp(g):
        return (
            g @ wv if isinstance(x, Var) else None,
            g.T @ xv if isinstance(w, Var) else None,
            g.sum(axis=0) if isinstance(b, Var) else None,
        )

    return Var(out, (x, w, b), vjp)


def concat(parts: Sequence, axis: int = 1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _is_var(*parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append(g[tuple(sl)] if isinstance(p, Var) else None)
        return tuple(pieces)

    return Var(out, tuple(parts), vjp)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function: exp is only taken of -|x|."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    xv = value_of(x)
    out = stable_sigmoid(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x):
    xv = value_of(x)
    s = stable_sigmoid(xv)
    out = xv * s
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * s * (1.0 + xv * (1.0 - s)),))


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * out,))


def clip(x, lo, hi):
    """Clamp with pass-through gradient on [lo, hi], zero outside."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not isinstance(x, Var):
        return out
    mask = ((xv >= lo) & (xv <= hi)).astype(xv.dtype)
    return Var(out, (x,), lambda g: (g * mask,))


def absolute(x):
    xv = value_of(x)
    out = np.abs(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * np.sign(xv),))


def power(x, p: float):
    """x**p for constant p; x must be nonnegative when p is fractional."""
    xv = value_of(x)
    out = xv**p
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g * p * xv ** (p - 1.0),))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (g.reshape(xv.shape),))


def total(x):
    """Sum of all entries, as a 0-d value."""
    xv = value_of(x)
    out = np.asarray(xv.sum())
    if not isinstance(x, Var):
        return out
    return Var(out, (x,), lambda g: (np.broadcast_to(g, xv.shape).astype(xv.dtype),))


def mean_sq_norm(a, b):
    """Mean over rows of the squared euclidean norm of (a - b)."""
    d = sub(a, b)
    n_rows = value_of(d).shape[0]
    return mul(total(mul(d, d)), 1.0 / n_rows)


def backward(out: Var) -> None:
    """Accumulate d(out)/d(node) into .grad for every Var reaching ``out``."""
    if not isinstance(out, Var):
        raise ParameterError("backward requires a Var")
    if out.value.size != 1:
        raise ParameterError("backward requires a scalar output")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
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
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not isinstance(parent, Var):
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / 2h.

    Evaluates f 2*x.size times in float64; raises if any evaluation is
    non-finite.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
