"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a :class:`Var` recording its input
nodes and vector-Jacobian products. ``backward`` walks the graph once in
reverse topological order and accumulates gradients into the leaves.
Only the operations needed by the shape-model energies are provided
(elementwise arithmetic, reductions, matmul, indexing, cross products,
Cholesky and triangular solves).

Gradients are exact up to floating point; the test-suite checks every
operation against central finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri


class Var:
    """A node in the computation graph: a value plus backward closures."""

    __slots__ = ("value", "grad", "parents", "needs_grad")

    # keep numpy from broadcasting Vars elementwise; reflected operators
    # below must win so ndarray <op> Var stays on the tape
    __array_ufunc__ = None

    def __init__(self, value, parents=(), needs_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(value):
    """Create a differentiable input node; gradients accumulate here."""
    return Var(np.asarray(value, dtype=float), (), True)


def wrap(x):
    """Treat ``x`` as a constant node unless it already is a Var."""
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=float), (), False)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents):
    live = tuple((p, f) for p, f in parents if p.needs_grad)
    if not live:
        return Var(value)
    return Var(value, live, True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = wrap(a), wrap(b)
    return _make(a.value + b.value,
                 ((a, lambda g: _unbroadcast(g, a.value.shape)),
                  (b, lambda g: _unbroadcast(g, b.value.shape))))


def sub(a, b):
    a, b = wrap(a), wrap(b)
    return _make(a.value - b.value,
                 ((a, lambda g: _unbroadcast(g, a.value.shape)),
                  (b, lambda g: _unbroadcast(-g, b.value.shape))))


def mul(a, b):
    a, b = wrap(a), wrap(b)
    return _make(a.value * b.value,
                 ((a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
                  (b, lambda g: _unbroadcast(g * a.value, b.value.shape))))


def div(a, b):
    a, b = wrap(a), wrap(b)
    return _make(a.value / b.value,
                 ((a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
                  (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value),
                                             b.value.shape))))


def neg(a):
    a = wrap(a)
    return _make(-a.value, ((a, lambda g: -g),))


def power(a, p):
    """Elementwise ``a ** p`` for a constant scalar exponent ``p``."""
    a = wrap(a)
    p = float(p)
    return _make(a.value ** p, ((a, lambda g: g * p * a.value ** (p - 1.0)),))


def exp(a):
    a = wrap(a)
    v = np.exp(a.value)
    return _make(v, ((a, lambda g: g * v),))


def log(a):
    a = wrap(a)
    return _make(np.log(a.value), ((a, lambda g: g / a.value),))


def sqrt(a):
    a = wrap(a)
    v = np.sqrt(a.value)
    return _make(v, ((a, lambda g: g * 0.5 / v),))


def square(a):
    a = wrap(a)
    return _make(a.value * a.value, ((a, lambda g: g * 2.0 * a.value),))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def sum_(a, axis=None, keepdims=False):
    a = wrap(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(x % a.value.ndim for x in ax)
        if not keepdims:
            for x in sorted(ax):
                g = np.expand_dims(g, x)
        return np.broadcast_to(g, a.value.shape).copy()

    return _make(v, ((a, vjp),))


def reshape(a, shape):
    a = wrap(a)
    return _make(a.value.reshape(shape), ((a, lambda g: np.asarray(g).reshape(a.value.shape)),))


def transpose(a, axes=None):
    a = wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), ((a, lambda g: np.transpose(g, inv)),))


def swap_last2(a):
    a = wrap(a)
    return _make(np.swapaxes(a.value, -1, -2), ((a, lambda g: np.swapaxes(g, -1, -2)),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(Ellipsis), type(None)))
               for i in items)


def getitem(a, idx):
    a = wrap(a)
    v = a.value[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return out

    return _make(v, ((a, vjp),))


def concat(parts, axis=0):
    parts = [wrap(p) for p in parts]
    vals = [p.value for p in parts]
    v = np.concatenate(vals, axis=axis)
    ax = axis % v.ndim
    sizes = [x.shape[ax] for x in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * np.asarray(g).ndim
            sl[ax] = slice(int(lo), int(hi))
            return np.asarray(g)[tuple(sl)]
        return vjp

    return _make(v, tuple((p, make_vjp(offsets[i], offsets[i + 1]))
                          for i, p in enumerate(parts)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = wrap(a), wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    v = a.value @ b.value

    def vjp_a(g):
        return _unbroadcast(np.asarray(g) @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ np.asarray(g), b.value.shape)

    return _make(v, ((a, vjp_a), (b, vjp_b)))


def cross3(a, b):
    """Cross product along the last axis (length 3)."""
    a, b = wrap(a), wrap(b)
    v = np.cross(a.value, b.value)

    def vjp_a(g):
        return _unbroadcast(np.cross(b.value, g), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.cross(g, a.value), b.value.shape)

    return _make(v, ((a, vjp_a), (b, vjp_b)))


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = wrap(a)
    L = np.linalg.cholesky(a.value)

    def vjp(g):
        # Reverse-mode rule for the Cholesky factor: with Phi taking the
        # lower triangle and halving the diagonal,
        #   abar = sym(L^{-T} Phi(L^T gbar) L^{-1}).
        m = L.shape[0]
        phi = np.tril(L.T @ np.asarray(g))
        phi[np.diag_indices(m)] *= 0.5
        x = _solve_tri(L, phi, lower=True, trans="T")
        s = _solve_tri(L, x.T, lower=True, trans="T").T
        return (s + s.T) / 2.0

    return _make(L, ((a, vjp),))


def solve_lower(L, B):
    """Solve ``L X = B`` with ``L`` lower triangular (2-D operands)."""
    L, B = wrap(L), wrap(B)
    X = _solve_tri(L.value, B.value, lower=True)

    def vjp_L(g):
        bbar = _solve_tri(L.value, np.asarray(g), lower=True, trans="T")
        return np.tril(-bbar @ X.T)

    def vjp_B(g):
        return _solve_tri(L.value, np.asarray(g), lower=True, trans="T")

    return _make(X, ((L, vjp_L), (B, vjp_B)))


# ---------------------------------------------------------------------------
# backward pass


def backward(out):
    """Accumulate gradients of the scalar ``out`` into the graph's leaves."""
    if np.size(out.value) != 1:
        raise ValueError("backward expects a scalar output")
    order = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg


def gradients(out, leaves):
    """Run backward and return gradients for a dict of named leaves."""
    backward(out)
    return {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
            for name, v in leaves.items()}
