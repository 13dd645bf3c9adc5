"""Batched reverse-mode differentiation on numpy arrays.

Every value is a numpy array of shape [B, k] with a shared batch dimension
B and k = 1 (scalar) or k = 3 (vector / RGB). Python floats act as
constants. Each primitive carries a hand-written vector-Jacobian product;
`backward` replays the tape in reverse topological order and accumulates
gradients on the leaves.

Closed-form reflectance terms are composed from these primitives so that
their derivatives with respect to material parameters and directions come
out exactly, without finite differencing.
"""

from __future__ import annotations

import numpy as np


class Var:
    """One tape node: value, accumulated gradient, and parent VJPs."""

    __slots__ = ("data", "grad", "parents", "vjps")

    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps

    # Operator sugar keeps term formulas readable.
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


def leaf(data):
    """Wrap an array as a gradient-carrying input."""
    return Var(data)


def _unbroadcast(g, shape):
    # Collapse the column axis when the operand was [B, 1] against [B, 3].
    if shape[1] == 1 and g.shape[1] != 1:
        return g.sum(axis=1, keepdims=True)
    return g


def _as_data(x):
    return x.data if isinstance(x, Var) else x


def add(a, b):
    if not isinstance(a, Var):
        a, b = b, a
    if isinstance(b, Var):
        return Var(
            a.data + b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
        )
    return Var(a.data + b, (a,), (lambda g: g,))


def sub(a, b):
    if isinstance(a, Var) and isinstance(b, Var):
        return Var(
            a.data - b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.data.shape), lambda g: -_unbroadcast(g, b.data.shape)),
        )
    if isinstance(a, Var):
        return Var(a.data - b, (a,), (lambda g: g,))
    return Var(a - b.data, (b,), (lambda g: -g,))


def mul(a, b):
    if not isinstance(a, Var):
        a, b = b, a
    if isinstance(b, Var):
        return Var(
            a.data * b.data,
            (a, b),
            (
                lambda g: _unbroadcast(g * b.data, a.data.shape),
                lambda g: _unbroadcast(g * a.data, b.data.shape),
            ),
        )
    return Var(a.data * b, (a,), (lambda g: g * b,))


def div(a, b):
    if isinstance(a, Var) and isinstance(b, Var):
        out = a.data / b.data
        return Var(
            out,
            (a, b),
            (
                lambda g: _unbroadcast(g / b.data, a.data.shape),
                lambda g: _unbroadcast(-g * out / b.data, b.data.shape),
            ),
        )
    if isinstance(a, Var):
        return Var(a.data / b, (a,), (lambda g: g / b,))
    out = a / b.data
    return Var(out, (b,), (lambda g: -g * out / b.data,))


def neg(a):
    return Var(-a.data, (a,), (lambda g: -g,))


def square(a):
    return Var(a.data * a.data, (a,), (lambda g: g * (2.0 * a.data),))


def powi(a, n):
    """Integer power; exact for negative bases."""
    out = a.data**n
    return Var(out, (a,), (lambda g: g * (n * a.data ** (n - 1)),))


def sqrt(a):
    out = np.sqrt(a.data)
    return Var(out, (a,), (lambda g: g * (0.5 / np.maximum(out, 1e-300)),))


def exp(a):
    out = np.exp(a.data)
    return Var(out, (a,), (lambda g: g * out,))


def log(a):
    return Var(np.log(a.data), (a,), (lambda g: g / a.data,))


def sin(a):
    return Var(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def cos(a):
    return Var(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def clamp_min(a, floor):
    mask = a.data > floor
    return Var(np.maximum(a.data, floor), (a,), (lambda g: np.where(mask, g, 0.0),))


def clamp(a, lo, hi):
    mask = (a.data > lo) & (a.data < hi)
    return Var(np.clip(a.data, lo, hi), (a,), (lambda g: np.where(mask, g, 0.0),))


def where(mask, a, b):
    """Select per-row; `mask` is a raw boolean array, not differentiated."""
    a_d, b_d = _as_data(a), _as_data(b)
    out = np.where(mask, a_d, b_d)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(lambda g: np.where(mask, g, 0.0))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(lambda g: np.where(mask, 0.0, g))
    return Var(out, tuple(parents), tuple(vjps))


def minimum(a, b):
    mask = _as_data(a) <= _as_data(b)
    return where(mask, a, b)


def dot(a, b):
    """Row-wise dot product of [B, 3] vectors -> [B, 1]."""
    out = np.einsum("ij,ij->i", a.data, b.data)[:, None]
    return Var(out, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def cross(a, b):
    out = np.cross(a.data, b.data)
    return Var(
        out,
        (a, b),
        (lambda g: np.cross(b.data, g), lambda g: np.cross(g, a.data)),
    )


def normalize(a):
    norm = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    norm = np.maximum(norm, 1e-300)
    out = a.data / norm

    def vjp(g):
        return (g - out * np.sum(g * out, axis=1, keepdims=True)) / norm

    return Var(out, (a,), (vjp,))


def concat(*parts):
    """Column-concatenate [B, 1] scalars into a [B, k] vector."""
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=1)

    def make_vjp(i):
        return lambda g: g[:, offsets[i] : offsets[i + 1]]

    return Var(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def component(a, i):
    """Extract column i of a vector as a [B, 1] scalar."""
    out = a.data[:, i : i + 1]
    width = a.data.shape[1]

    def vjp(g):
        full = np.zeros((g.shape[0], width))
        full[:, i : i + 1] = g
        return full

    return Var(out, (a,), (vjp,))


def _toposort(roots):
    order, visited = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(seeds):
    """Accumulate gradients for `[(var, seed_array), ...]` pairs.

    Gradients land on every reachable Var's `.grad`; leaves keep them for
    the caller to read. Seeding several outputs at once shares one sweep
    over the tape.
    """
    pairs = list(seeds)
    order = _toposort([v for v, _ in pairs])
    for node in order:
        node.grad = None
    for var, seed in pairs:
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), var.data.shape)
        var.grad = seed.copy() if var.grad is None else var.grad + seed
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            g = vjp(node.grad)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
