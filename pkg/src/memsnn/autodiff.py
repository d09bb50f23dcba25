"""Minimal reverse-mode automatic differentiation on a dynamic tape.

Every primitive evaluates eagerly and, when at least one operand is a
:class:`Var`, appends a node holding its vector-Jacobian product to the
operand's :class:`Tape`.  Called with plain floats or numpy arrays the same
functions just compute values, so model code is written once and runs both
on and off the tape.

Only elementwise ops (with constant broadcasting), ``matvec``, ``sum``,
``stack`` and ``log_softmax`` exist; this is all the circuit equations and
the loss need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, SingularDivision

DIV_GUARD = 1e-30
EXP_CLAMP = 500.0


@dataclass
class Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of primitive operations.

    Node ``i`` only ever references nodes ``< i``, so reverse recording order
    is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Var:
        value = np.array(value, dtype=np.float64)
        return self._push(value, (), None)

    def _push(self, value, parents, vjp) -> Var:
        self.nodes.append(Node(parents, vjp, np.shape(value)))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")
    # numpy must hand mixed ndarray/Var arithmetic to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Gradients(dict):
    """Map from leaf node id to gradient; also indexable by the leaf Var."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.index
        return super().__getitem__(key)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ShapeError("operands were recorded on different tapes")
    return tape


def _check_elementwise(a, b):
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if isinstance(a, Var) and isinstance(b, Var):
        if sa != sb:
            raise ShapeError(f"shape mismatch {sa} vs {sb}")
        return sa
    # a constant may broadcast into a Var, never the other way round
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ShapeError(f"shape mismatch {sa} vs {sb}") from exc
    var_shape = sa if isinstance(a, Var) else sb
    if out != var_shape:
        raise ShapeError(f"constant of shape {sb if isinstance(a, Var) else sa} "
                         f"would broadcast Var of shape {var_shape}")
    return out


def _binary(a, b, op, da, db):
    """Apply ``op`` to the operand values; record a node if either is a Var.

    ``da``/``db`` receive the upstream adjoint and the output value.
    """
    tape = _tape_of(a, b)
    if tape is not None:
        _check_elementwise(a, b)
    out = op(value_of(a), value_of(b))
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        fns.append(da)
    if isinstance(b, Var):
        parents.append(b.index)
        fns.append(db)
    return tape._push(out, tuple(parents), lambda g: tuple(f(g, out) for f in fns))


def _unary(x, out, dx):
    if not isinstance(x, Var):
        return out
    return x.tape._push(out, (x.index,), lambda g: (dx(g),))


def add(a, b):
    return _binary(a, b, np.add, lambda g, out: g, lambda g, out: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, out: g, lambda g, out: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, np.multiply, lambda g, out: g * bv, lambda g, out: g * av)


def div(a, b):
    bv = value_of(b)
    if np.any(np.abs(bv) < DIV_GUARD):
        raise SingularDivision(f"|denominator| < {DIV_GUARD:g}")
    return _binary(a, b, np.divide, lambda g, out: g / bv, lambda g, out: -g * out / bv)


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def scale(x, c: float):
    return _unary(x, c * value_of(x), lambda g: c * g)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _unary(x, np.log(xv), lambda g: g / xv)


def logistic(x):
    """1 / (1 + exp(-x)) with the exponent clamped to +-500."""
    z = np.clip(value_of(x), -EXP_CLAMP, EXP_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def clip(x, lo: float, hi: float):
    xv = value_of(x)
    inside = (xv >= lo) & (xv <= hi)
    return _unary(x, np.clip(xv, lo, hi), lambda g: g * inside)


def matvec(w, v):
    """Crossbar product ``w @ v`` for one vector ``(n_in,)`` or a batch ``(B, n_in)``."""
    wv, vv = value_of(w), value_of(v)
    if np.ndim(wv) != 2 or np.ndim(vv) not in (1, 2) or np.shape(vv)[-1] != np.shape(wv)[1]:
        raise ShapeError(f"matvec shape mismatch {np.shape(wv)} x {np.shape(vv)}")
    out = vv @ wv.T
    tape = _tape_of(w, v)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(w, Var):
        parents.append(w.index)
        fns.append(lambda g: np.outer(g, vv) if vv.ndim == 1 else g.T @ vv)
    if isinstance(v, Var):
        parents.append(v.index)
        fns.append(lambda g: g @ wv)
    return tape._push(out, tuple(parents), lambda g: tuple(f(g) for f in fns))


def sum(x):  # noqa: A001 - mirrors numpy naming
    xv = value_of(x)
    shape = np.shape(xv)
    return _unary(x, np.sum(xv), lambda g: np.broadcast_to(g, shape))


def stack(xs: Sequence, axis: int = 0):
    vals = [value_of(x) for x in xs]
    shapes = {np.shape(v) for v in vals}
    if len(shapes) != 1:
        raise ShapeError(f"stack of mismatched shapes {sorted(shapes)}")
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    idx = [i for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in idx)

    return tape._push(out, tuple(xs[i].index for i in idx), vjp)


def log_softmax(x):
    """Log-softmax over the last axis."""
    xv = value_of(x)
    shifted = xv - np.max(xv, axis=-1, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    soft = np.exp(out)
    return _unary(x, out, lambda g: g - soft * np.sum(g, axis=-1, keepdims=True))


def backward(tape: Tape, loss: Var, leaves: Sequence[Var]) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to ``leaves``.

    Adjoints are accumulated in exact reverse recording order and the tape
    is left untouched, so repeated calls give bit-identical results.
    """
    if loss.tape is not tape or any(leaf.tape is not tape for leaf in leaves):
        raise ShapeError("loss and leaves must live on the given tape")
    if np.size(loss.value) != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    wanted = {leaf.index for leaf in leaves}
    grads = Gradients()
    adj = {loss.index: np.ones_like(loss.value, dtype=np.float64)}
    for i in range(loss.index, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite adjoint at node {i}")
        if i in wanted:
            grads[i] = np.array(g, dtype=np.float64)
        node = tape.nodes[i]
        if not node.parents:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            adj[p] = adj[p] + gp if p in adj else gp
    for leaf in leaves:
        if leaf.index not in grads:
            grads[leaf.index] = np.zeros(leaf.shape)
    return grads


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_leaf: tuple[int, tuple[int, ...]] | None
    tol: float
    failures: list[tuple[int, tuple[int, ...], float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def gradcheck(f: Callable, params: Sequence, eps: float = 1e-6, tol: float = 1e-4) -> GradcheckReport:
    """Compare ``backward`` against central differences on every coordinate.

    ``f`` must accept either Vars or plain arrays and return a scalar.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    grads = backward(tape, f(*leaves), leaves)

    report = GradcheckReport(0.0, None, tol)
    for k, p in enumerate(params):
        for coord in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][coord] += eps
            minus[k][coord] -= eps
            numeric = (float(f(*plus)) - float(f(*minus))) / (2 * eps)
            err = float(rel_err(grads[leaves[k]][coord], numeric))
            if err > report.max_rel_err or report.worst_leaf is None:
                report.max_rel_err = max(err, report.max_rel_err)
                report.worst_leaf = (k, coord)
            if err >= tol:
                report.failures.append((k, coord, err))
    return report
