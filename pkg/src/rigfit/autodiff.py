"""A small reverse-mode differentiation tape over numpy arrays.

Nodes hold whole arrays, so one recorded op covers a full matrix product or
elementwise map. Domain code (skinning, sparse operators) registers fused
primitives through :meth:`Tape.record` with a hand-written vector-Jacobian
product.

Conventions at non-differentiable points: ``abs'(0) = 0``, ``sqrt'(0) = 0``
and the box penalty has zero slope on its boundary.
"""
import numpy as np


class Var:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "name")
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is a primitive")
        return square(self)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records operations; one tape per fitting job."""

    def __init__(self):
        self.nodes = []

    def var(self, value, name=None):
        return Var(np.array(value, dtype=np.float64), self, name=name)

    def record(self, value, parents, vjp):
        """Register a primitive.

        ``vjp(g)`` receives the output adjoint and returns one adjoint per
        entry of ``parents`` (``None`` for non-differentiable inputs).
        """
        return Var(value, self, tuple(parents), vjp)

    def gradient(self, output, wrt):
        """Adjoints of scalar ``output`` with respect to each Var in ``wrt``."""
        if np.size(output.value) != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        adj = {output.index: np.ones_like(output.value, dtype=np.float64)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj.pop(node.index, None)
            if g is None or node.vjp is None:
                if g is not None:
                    adj[node.index] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
        out = []
        for w in wrt:
            g = adj.get(w.index)
            out.append(np.zeros_like(w.value, dtype=np.float64) if g is None else np.asarray(g, dtype=np.float64))
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    while np.ndim(g) > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _tape_of(a, b).record(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _tape_of(a, b).record(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def neg(a):
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _tape_of(a, b).record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _tape_of(a, b).record(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), g @ av
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _tape_of(a, b).record(av @ bv, (a, b), vjp)


def square(a):
    return a.tape.record(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a):
    out = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return a.tape.record(out, (a,), vjp)


def vabs(a):
    return a.tape.record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    s = sigmoid_np(a.value)
    return a.tape.record(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a):
    """``x * sigmoid(x)`` as one fused primitive."""
    x = a.value
    s = sigmoid_np(x)
    return a.tape.record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def sin(a):
    return a.tape.record(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a):
    return a.tape.record(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def box_penalty(a, lo, hi):
    """Distance outside ``[lo, hi]`` per element, zero inside and on the boundary."""
    x = a.value
    over = x > hi
    under = x < lo
    out = np.where(over, x - hi, 0.0) + np.where(under, lo - x, 0.0)
    return a.tape.record(out, (a,), lambda g: (g * (over.astype(float) - under.astype(float)),))


def vsum(a, axis=None):
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis), (a,), vjp)


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def reshape(a, shape):
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def getitem(a, key):
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return a.tape.record(a.value[key], (a,), vjp)


def segment_sum(a, segments, count):
    """``out[s] = sum(a[i] for segments[i] == s)`` along axis 0."""
    seg = np.asarray(segments)
    out = np.zeros((count,) + a.value.shape[1:])
    np.add.at(out, seg, a.value)
    return a.tape.record(out, (a,), lambda g: (g[seg],))


def concat(parts, axis=0):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.record(np.concatenate(vals, axis=axis), parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts, axis=0):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    return tape.record(
        np.stack(vals, axis=axis), parts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(vals))),
    )


def linear_map(op, a):
    """Apply a fixed linear operator (dense or scipy.sparse) from the left."""
    return a.tape.record(op @ a.value, (a,), lambda g: (op.T @ g,))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def value_and_grad(loss_fn, x):
    """Evaluate ``loss_fn`` on a fresh tape; returns ``(value, gradient)``."""
    tape = Tape()
    xv = tape.var(x)
    out = loss_fn(xv)
    (g,) = tape.gradient(out, [xv])
    return float(out.value), g


def finite_difference_check(loss_fn, params, h=1e-5, rel_floor=1e-3):
    """Worst per-coordinate relative gap between tape and central differences.

    ``loss_fn`` maps a Var to a scalar Var. The relative error of each
    coordinate is ``|ad - fd| / max(|ad|, |fd|, rel_floor * max|fd|)``, so
    coordinates whose true gradient is numerically zero do not divide by noise.
    """
    x = np.array(params, dtype=np.float64)
    _, g = value_and_grad(loss_fn, x)
    fd = np.zeros_like(x)
    flat, fdf = x.reshape(-1), fd.reshape(-1)

    def f(v):
        tape = Tape()
        return float(loss_fn(tape.var(v.reshape(x.shape))).value)

    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(flat)
        flat[i] = old - h
        down = f(flat)
        flat[i] = old
        fdf[i] = (up - down) / (2.0 * h)
    scale = max(np.abs(fd).max(initial=0.0), np.abs(g).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), rel_floor * scale)
    return float(np.max(np.abs(g - fd) / denom))
