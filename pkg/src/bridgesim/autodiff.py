"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the handful of operations needed to unroll the neural guided SDE are
provided. Every op accepts plain arrays as well as :class:`Var`; when no
argument is a ``Var`` the op simply returns the numpy result, so the same
code path serves both gradient evaluation and plain sampling.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

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

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, index={self.index})"


class Tape:
    """Records ``(output, parents, vjp)`` in creation order, which is topological."""

    def __init__(self):
        self._nodes: list[tuple[int, tuple, Callable]] = []
        self._size = 0

    def __len__(self):
        return len(self._nodes)

    def _new(self, value) -> Var:
        var = Var(value, self, self._size)
        self._size += 1
        return var

    def leaf(self, value) -> Var:
        return self._new(np.asarray(value, dtype=float))

    def record(self, value, parents: Sequence, vjp: Callable) -> Var:
        """``vjp(g)`` must return one cotangent per parent (None for constants)."""
        out = self._new(value)
        self._nodes.append((out.index, tuple(p.index if isinstance(p, Var) else None for p in parents), vjp))
        return out

    def gradient(self, output: Var, wrt: Sequence[Var], seed=None) -> list:
        """Adjoint sweep from scalar ``output``; each recorded node is consumed once."""
        grads: list = [None] * self._size
        grads[output.index] = np.ones_like(output.value) if seed is None else seed
        for out_idx, parent_idx, vjp in reversed(self._nodes):
            g = grads[out_idx]
            if g is None:
                continue
            grads[out_idx] = None
            cots = vjp(g)
            for p, cot in zip(parent_idx, cots):
                if p is None or cot is None:
                    continue
                grads[p] = cot if grads[p] is None else grads[p] + cot
        return [np.zeros_like(w.value) if grads[w.index] is None else grads[w.index] for w in wrt]


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def value(a):
    return a.value if isinstance(a, Var) else a


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    out = value(a) + value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    out = value(a) - value(b)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(value(a)), np.shape(value(b))
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return tape.record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * vb, sa) if isinstance(a, Var) else None,
            _unbroadcast(g * va, sb) if isinstance(b, Var) else None,
        ),
    )


def matmul_const(x, A: np.ndarray):
    """Row-wise ``A @ x_n``, i.e. ``x @ A.T`` with a constant matrix ``A``."""
    out = value(x) @ A.T
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (g @ A,))


def bmv(S, y):
    """Row-wise ``S_n @ y_n``; ``S`` is (d, k) shared or (N, d, k) per row."""
    vS, vy = value(S), value(y)
    out = vy @ vS.T if vS.ndim == 2 else np.einsum("nij,nj->ni", vS, vy)
    tape = _tape_of(S, y)
    if tape is None:
        return out

    def vjp(g):
        gS = None
        if isinstance(S, Var):
            gS = np.einsum("ni,nj->nij", g, vy) if vS.ndim == 3 else g.T @ vy
        gy = None
        if isinstance(y, Var):
            gy = g @ vS if vS.ndim == 2 else np.einsum("nij,ni->nj", vS, g)
        return gS, gy

    return tape.record(out, (S, y), vjp)


def bmtv(S, y):
    """Row-wise ``S_n^T @ y_n``."""
    vS, vy = value(S), value(y)
    out = vy @ vS if vS.ndim == 2 else np.einsum("nij,ni->nj", vS, vy)
    tape = _tape_of(S, y)
    if tape is None:
        return out

    def vjp(g):
        gS = None
        if isinstance(S, Var):
            gS = np.einsum("ni,nj->nij", vy, g) if vS.ndim == 3 else vy.T @ g
        gy = None
        if isinstance(y, Var):
            gy = g @ vS.T if vS.ndim == 2 else np.einsum("nij,nj->ni", vS, g)
        return gS, gy

    return tape.record(out, (S, y), vjp)


def row_dot(a, b):
    """Per-row inner product of two (N, k) arrays, returns (N,)."""
    va, vb = value(a), value(b)
    out = np.einsum("ni,ni->n", va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        out,
        (a, b),
        lambda g: (
            g[:, None] * vb if isinstance(a, Var) else None,
            g[:, None] * va if isinstance(b, Var) else None,
        ),
    )


def quad_trace(S, H: np.ndarray):
    """Per-row ``tr(S_n^T H S_n)`` for (N, d, k) ``S`` and constant symmetric ``H``."""
    vS = value(S)
    HS = np.einsum("ij,njk->nik", H, vS)
    out = np.einsum("nik,nik->n", vS, HS)
    if not isinstance(S, Var):
        return out
    return S.tape.record(out, (S,), lambda g: (2.0 * g[:, None, None] * HS,))


def total(a):
    """Sum of all entries."""
    va = value(a)
    out = np.sum(va)
    if not isinstance(a, Var):
        return out
    shape = va.shape
    return a.tape.record(out, (a,), lambda g: (np.full(shape, g),))


def add_n(items: Sequence):
    """Sum of a list of equally shaped terms as a single node."""
    out = np.sum([value(a) for a in items], axis=0)
    tape = _tape_of(*items)
    if tape is None:
        return out
    return tape.record(out, tuple(items), lambda g: (g,) * len(items))


def apply(f: Callable, vjp: Callable, x):
    """Wrap a function ``f(x)`` whose VJP is ``vjp(x, g)``."""
    vx = value(x)
    out = f(vx)
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (vjp(vx, g),))

