"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Operations accept either plain arrays or :class:`Var` objects. With plain
arrays they return plain arrays and record nothing, so the model code in
``gmamba``, ``goad`` and ``losses`` is written once and serves both the
inference path and the training/gradient-check path.

Kink conventions: ``relu'(0) = 0``, ``|x|'(0) = 0``, clip passes gradient
only strictly inside its bounds, sorting follows the realized permutation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


class _Node:
    __slots__ = ("parents", "vjp", "shape")

    def __init__(self, parents, vjp, shape):
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Append-only record of primitive operations.

    Node ids are assigned in creation order; since a node can only be built
    from existing nodes, the list is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value):
        """Register a leaf (an input we want gradients for)."""
        value = np.array(value, dtype=np.float64)
        return self._push(value, (), None)

    def _push(self, value, parents, vjp):
        node_id = len(self.nodes)
        self.nodes.append(_Node(parents, vjp, np.shape(value)))
        return Var(self, node_id, value)


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x):
    """The numeric value of ``x`` whether or not it is recorded."""
    return x.value if isinstance(x, Var) else x


def is_var(x):
    return isinstance(x, Var)


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def lift(out, inputs, vjp):
    """Record ``out`` as a function of ``inputs`` if any input is a Var.

    ``vjp(g)`` must return one gradient (or None) per input, in order.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out
    parents = tuple((k, a.id) for k, a in enumerate(inputs) if isinstance(a, Var))
    return tape._push(out, parents, vjp)


class Gradients:
    """Gradients of one scalar output, indexed by the Var they belong to."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var):
        if var.tape is not self._tape:
            raise KeyError("variable belongs to another tape")
        g = self._grads[var.id]
        if g is None:
            return np.zeros(var.shape)
        return g


def backward(tape, output):
    """Reverse sweep from a scalar ``output``; every node is visited at most once."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output must be a Var recorded on this tape")
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads = [None] * len(tape.nodes)
    grads[output.id] = np.ones(output.shape)
    for node_id in range(output.id, -1, -1):
        g = grads[node_id]
        node = tape.nodes[node_id]
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for k, pid in node.parents:
            pg = parent_grads[k]
            if pg is None:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), tape.nodes[pid].shape)
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    return Gradients(tape, grads)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    return lift(value(a) + value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return lift(value(a) - value(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = value(a), value(b)
    return lift(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return lift(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    return lift(-value(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(value(a))
    return lift(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return lift(np.log(av), (a,), lambda g: (g / av,))


def sigmoid(a):
    av = np.asarray(value(a), dtype=np.float64)
    e = np.exp(-np.abs(av))
    out = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return lift(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = value(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return lift(out, (a,), lambda g: (g * sigmoid(av),))


def relu(a):
    av = value(a)
    return lift(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def abs_(a):
    av = value(a)
    return lift(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def clip(a, lo, hi):
    av = value(a)
    inside = (av > lo) & (av < hi)
    return lift(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a, axis=None):
    av = value(a)
    out = np.sum(av, axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, np.shape(av)).copy(),)

    return lift(out, (a,), vjp)


def mean(a, axis=None):
    av = value(a)
    n = np.size(av) if axis is None else np.prod([np.shape(av)[k] for k in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    av = value(a)
    return lift(np.reshape(av, shape), (a,), lambda g: (np.reshape(g, np.shape(av)),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return lift(np.transpose(value(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def flip(a, axis):
    return lift(np.flip(value(a), axis), (a,), lambda g: (np.flip(g, axis),))


def getitem(a, index):
    av = value(a)

    def vjp(g):
        full = np.zeros(np.shape(av))
        np.add.at(full, index, g)
        return (full,)

    return lift(av[index], (a,), vjp)


def take(a, indices):
    """Gather from the flattened ``a``; repeated indices accumulate on backward."""
    av = value(a)
    idx = np.asarray(indices)

    def vjp(g):
        full = np.zeros(np.size(av))
        np.add.at(full, idx.ravel(), np.ravel(g))
        return (full.reshape(np.shape(av)),)

    return lift(np.ravel(av)[idx], (a,), vjp)


def concat(parts, axis=0):
    vals = [value(p) for p in parts]
    sizes = [np.shape(v)[axis] for v in vals]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return lift(np.concatenate(vals, axis=axis), tuple(parts), vjp)


def stack(parts, axis=0):
    vals = [value(p) for p in parts]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return lift(np.stack(vals, axis=axis), tuple(parts), vjp)


def dot(a, b):
    """Inner product of two equally-shaped arrays."""
    av, bv = value(a), value(b)
    return lift(np.sum(av * bv), (a, b), lambda g: (g * bv, g * av))


def softmax(a, axis=0):
    av = value(a)
    z = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return lift(out, (a,), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f, point, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``point``."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(g_ad, g_fd, floor=1e-8):
    """Per-coordinate |ad - fd| / max(|ad|, |fd|, floor)."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    return np.abs(g_ad - g_fd) / np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), floor)


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    worst_arg: int
    step: float

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol
