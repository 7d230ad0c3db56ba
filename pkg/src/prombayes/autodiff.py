"""Reverse-mode automatic differentiation on a per-evaluation tape.

The model's joint log-density is a scalar function of ~70 unconstrained
parameters, so reverse mode (one backward sweep) beats forward mode (one
sweep per coordinate) by a wide margin.  Each call to :func:`grad` records
a fresh tape; nodes hold numpy arrays, so the model is written with
row-vectorized operations and the tape stays a few hundred nodes long.

Every primitive here is written against plain numpy values first and the
``Var`` wrapper reuses the same value computation, so evaluating a function
on arrays and evaluating it through the tape give bitwise-identical values.
Tapes are confined to the thread that built them; there is no shared state.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "grad",
    "value_of",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "sigmoid",
    "log_sigmoid",
    "logsumexp",
    "clamp_min",
    "vsum",
    "dot",
    "matvec",
    "take",
    "stack",
]


class Tape:
    """Ordered record of one evaluation; nodes are appended topologically."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def add(self, var):
        var.idx = len(self.nodes)
        self.nodes.append(var)


class Var:
    """One tape node: a value plus the local backward rule.

    ``vjp`` maps the adjoint of this node to adjoint contributions for each
    parent, in parent order.  Leaves have no parents and no vjp.
    """

    __slots__ = ("value", "parents", "vjp", "tape", "op", "idx")

    # Keep numpy from consuming Vars in ufuncs; unsupported primitives then
    # fail loudly with TypeError instead of silently coercing.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, tape=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.tape = tape if tape is not None else parents[0].tape
        self.op = op
        self.tape.add(self)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Var):
            v = self.value + other.value
            return Var(v, (self, other),
                       lambda g: (_unbroadcast(g, self.value),
                                  _unbroadcast(g, other.value)),
                       op="add")
        v = self.value + other
        return Var(v, (self,), lambda g: (_unbroadcast(g, self.value),), op="add")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            v = self.value - other.value
            return Var(v, (self, other),
                       lambda g: (_unbroadcast(g, self.value),
                                  _unbroadcast(-g, other.value)),
                       op="sub")
        v = self.value - other
        return Var(v, (self,), lambda g: (_unbroadcast(g, self.value),), op="sub")

    def __rsub__(self, other):
        v = other - self.value
        return Var(v, (self,), lambda g: (_unbroadcast(-g, self.value),), op="rsub")

    def __mul__(self, other):
        if isinstance(other, Var):
            v = self.value * other.value
            return Var(v, (self, other),
                       lambda g: (_unbroadcast(g * other.value, self.value),
                                  _unbroadcast(g * self.value, other.value)),
                       op="mul")
        v = self.value * other
        return Var(v, (self,),
                   lambda g: (_unbroadcast(g * other, self.value),), op="mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            v = self.value / other.value
            return Var(v, (self, other),
                       lambda g: (_unbroadcast(g / other.value, self.value),
                                  _unbroadcast(-g * self.value / other.value**2,
                                               other.value)),
                       op="div")
        v = self.value / other
        return Var(v, (self,),
                   lambda g: (_unbroadcast(g / other, self.value),), op="div")

    def __rtruediv__(self, other):
        v = other / self.value
        return Var(v, (self,),
                   lambda g: (_unbroadcast(-g * other / self.value**2, self.value),),
                   op="rdiv")

    def __neg__(self):
        return Var(-self.value, (self,),
                   lambda g: (_unbroadcast(-g, self.value),), op="neg")

    def __pow__(self, n):
        if isinstance(n, Var):
            raise TypeError("unsupported primitive: variable exponent in pow")
        v = self.value ** n
        x = self.value
        return Var(v, (self,),
                   lambda g: (_unbroadcast(g * n * x ** (n - 1), x),), op="pow")

    def __getitem__(self, key):
        v = self.value[key]

        def vjp(g):
            z = np.zeros_like(self.value, dtype=float)
            z[key] = g
            return (z,)

        return Var(v, (self,), vjp, op="index")

    def sum(self, axis=None):
        return vsum(self, axis=axis)

    def __repr__(self):
        return f"Var({self.op}, value={self.value!r})"


def _unbroadcast(g, target_value):
    """Reduce an adjoint back to the shape of the operand it belongs to."""
    shape = np.shape(target_value)
    gshape = np.shape(g)
    if gshape == shape:
        return g
    if shape == ():
        return np.sum(g)
    # Sum away leading broadcast dimensions, then size-1 axes.
    while np.ndim(g) > len(shape):
        g = np.sum(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and np.shape(g)[ax] != 1:
            g = np.sum(g, axis=ax, keepdims=True)
    return g


def value_of(x):
    return x.value if isinstance(x, Var) else x


# -- primitive functions (dispatch on Var vs plain) --------------------------


def _sigmoid_value(x):
    z = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _log_sigmoid_value(x):
    xa = np.asarray(x)
    return np.minimum(xa, 0.0) - np.log1p(np.exp(-np.abs(xa)))


def _logsumexp_value(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def exp(x):
    if isinstance(x, Var):
        v = np.exp(x.value)
        return Var(v, (x,), lambda g: (g * v,), op="exp")
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return Var(np.log(x.value), (x,), lambda g: (g / x.value,), op="log")
    return np.log(x)


def log1p(x):
    if isinstance(x, Var):
        return Var(np.log1p(x.value), (x,),
                   lambda g: (g / (1.0 + x.value),), op="log1p")
    return np.log1p(x)


def sqrt(x):
    if isinstance(x, Var):
        v = np.sqrt(x.value)
        return Var(v, (x,), lambda g: (g * 0.5 / v,), op="sqrt")
    return np.sqrt(x)


def sigmoid(x):
    if isinstance(x, Var):
        v = _sigmoid_value(x.value)
        return Var(v, (x,), lambda g: (g * v * (1.0 - v),), op="sigmoid")
    return _sigmoid_value(x)


def log_sigmoid(x):
    if isinstance(x, Var):
        v = _log_sigmoid_value(x.value)
        # d/dx log sigmoid(x) = sigmoid(-x)
        return Var(v, (x,),
                   lambda g: (g * _sigmoid_value(-x.value),), op="log_sigmoid")
    return _log_sigmoid_value(x)


def logsumexp(x, axis=0):
    """Fused, max-shifted log-sum-exp; the marginalization workhorse."""
    if isinstance(x, Var):
        v = _logsumexp_value(x.value, axis)
        def vjp(g):
            soft = np.exp(x.value - np.expand_dims(v, axis))
            return (np.expand_dims(g, axis) * soft,)
        return Var(v, (x,), vjp, op="logsumexp")
    return _logsumexp_value(x, axis)


def clamp_min(x, floor):
    if isinstance(x, Var):
        v = np.maximum(x.value, floor)
        return Var(v, (x,),
                   lambda g: (g * (x.value > floor),), op="clamp_min")
    return np.maximum(x, floor)


def vsum(x, axis=None):
    if isinstance(x, Var):
        v = np.sum(x.value, axis=axis)
        shape = np.shape(x.value)
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape),)
        return Var(v, (x,), vjp, op="sum")
    return np.sum(x, axis=axis)


def dot(x, w):
    """Inner product of a variable vector with a constant vector."""
    if isinstance(x, Var):
        v = float(np.dot(x.value, w))
        return Var(v, (x,), lambda g: (g * np.asarray(w),), op="dot")
    return float(np.dot(x, w))


def matvec(a, x):
    """Constant matrix times variable vector."""
    if isinstance(x, Var):
        v = a @ x.value
        return Var(v, (x,), lambda g: (a.T @ g,), op="matvec")
    return a @ x


def take(x, idx):
    """Gather by a constant index array (repeats allowed)."""
    if isinstance(x, Var):
        v = x.value[idx]

        def vjp(g):
            z = np.zeros_like(x.value, dtype=float)
            np.add.at(z, idx, g)
            return (z,)

        return Var(v, (x,), vjp, op="take")
    return x[idx]


def stack(items):
    """Stack scalars into a vector (or vectors into rows of a matrix)."""
    if any(isinstance(it, Var) for it in items):
        if not all(isinstance(it, Var) for it in items):
            items = [it if isinstance(it, Var) else _const_var(items, it)
                     for it in items]
        v = np.stack([it.value for it in items], axis=0)
        def vjp(g):
            return tuple(g[i] for i in range(len(items)))
        return Var(v, tuple(items), vjp, op="stack")
    return np.stack(items, axis=0)


def _const_var(items, value):
    tape = next(it.tape for it in items if isinstance(it, Var))
    return Var(value, (), None, tape=tape, op="const")


# -- driver -------------------------------------------------------------------


def grad(f, x, check_finite=False):
    """Evaluate ``f`` at ``x`` and return ``(value, gradient)``.

    ``f`` must map a Var vector to a scalar Var using the primitives above.
    With ``check_finite`` the whole tape is scanned after the forward pass and
    a non-finite intermediate raises ``FloatingPointError`` naming the node.
    """
    x = np.asarray(x, dtype=float)
    tape = Tape()
    leaf = Var(x, (), None, tape=tape, op="leaf")
    out = f(leaf)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(x)
    if np.shape(out.value) != ():
        raise ValueError("grad expects a scalar-valued function")
    if check_finite:
        for node in tape.nodes:
            if not np.all(np.isfinite(node.value)):
                raise FloatingPointError(
                    f"non-finite intermediate at node {node.idx} ({node.op})")
    adjoints = [None] * len(tape.nodes)
    adjoints[out.idx] = np.float64(1.0)
    for node in reversed(tape.nodes):
        g = adjoints[node.idx]
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if adjoints[parent.idx] is None:
                adjoints[parent.idx] = pg
            else:
                adjoints[parent.idx] = adjoints[parent.idx] + pg
    gx = adjoints[leaf.idx]
    if gx is None:
        return float(out.value), np.zeros_like(x)
    return float(out.value), np.broadcast_to(np.asarray(gx, dtype=float), x.shape).copy()
