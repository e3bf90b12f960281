"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive accepts either plain arrays or :class:`Var` objects. With
plain inputs it is just the numpy computation; as soon as one input is a
``Var`` the result is recorded on that variable's :class:`Tape` together
with its vector-Jacobian product. ``value_and_grad`` drives the whole thing
for functions of a :class:`ParamVector`.

Only what the losses, the coupling flow and the regression head need is
supported. Broadcasting is limited to the usual "(B, n) op (n,)" and
"array op scalar" cases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """A recorded primitive produced NaN or inf."""


class Tape:
    """Flat, topologically ordered record of primitive applications."""

    def __init__(self):
        self.values = []
        self.parents = []
        self.vjps = []
        self.names = []

    def __len__(self):
        return len(self.values)

    def leaf(self, value, name="leaf"):
        return self._push(name, np.asarray(value, dtype=np.float64), (), None)

    def record(self, name, value, parents, vjp):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"non-finite value produced by primitive '{name}' (tape node {len(self.values)})"
            )
        return self._push(name, value, parents, vjp)

    def _push(self, name, value, parents, vjp):
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.names.append(name)
        return Var(value, self, idx)

    def backward(self, out):
        """Propagate d(out)/d(node) for every node; ``out`` must be a scalar."""
        if np.size(out.value) != 1:
            raise ValueError("backward needs a scalar output")
        grads = [None] * len(self.values)
        grads[out.index] = np.ones_like(out.value)
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None or not self.parents[i]:
                continue
            contribs = self.vjps[i](g)
            for p, c in zip(self.parents[i], contribs):
                if p is None or c is None:
                    continue
                if grads[p] is None:
                    grads[p] = c
                else:
                    grads[p] = grads[p] + c
        return grads


class Var:
    """A value living on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _idx(x):
    return x.index if isinstance(x, Var) else None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(value_of(x))


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        "add", out, (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        "sub", out, (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        "mul", out, (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        "div", out, (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


# -- elementwise unary -------------------------------------------------------

def neg(x):
    xv = value_of(x)
    if not isinstance(x, Var):
        return -xv
    return x.tape.record("neg", -xv, (x.index,), lambda g: (-g,))


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record("exp", out, (x.index,), lambda g: (g * out,))


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record("log", out, (x.index,), lambda g: (g / xv,))


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record("tanh", out, (x.index,), lambda g: (g * (1.0 - out * out),))


def square(x):
    xv = value_of(x)
    out = xv * xv
    if not isinstance(x, Var):
        return out
    return x.tape.record("square", out, (x.index,), lambda g: (2.0 * g * xv,))


def absolute(x):
    xv = value_of(x)
    out = np.abs(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record("abs", out, (x.index,), lambda g: (g * np.sign(xv),))


def clip(x, lo, hi):
    """Clamp with zero gradient outside ``[lo, hi]``."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not isinstance(x, Var):
        return out
    inside = (xv >= lo) & (xv <= hi)
    return x.tape.record("clip", out, (x.index,), lambda g: (g * inside,))


# -- reductions and structure ------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    xv = value_of(x)
    out = np.sum(xv, axis=axis)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record("sum", out, (x.index,), vjp)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        "matmul", out, (_idx(a), _idx(b)),
        lambda g: (g @ bv.T, av.T @ g),
    )


def affine(x, w, b):
    """``x @ w + b`` as a single node."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv + bv
    tape = _tape_of(x, w, b)
    if tape is None:
        return out
    return tape.record(
        "affine", out, (_idx(x), _idx(w), _idx(b)),
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)),
    )


def mlp(x, weights, biases):
    """Fused tanh MLP (linear last layer); forward/backward run in ``tolf.kernels``."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    wv = [value_of(w) for w in weights]
    bv = [value_of(b) for b in biases]
    out, hidden = kernels.mlp_forward(xv, wv, bv)
    tape = _tape_of(x, *weights, *biases)
    if tape is None:
        return out
    n = len(wv)

    def vjp(g):
        gx, gws, gbs = kernels.mlp_backward(g, xv, wv, hidden)
        return (gx, *gws, *gbs)

    parents = (_idx(x),) + tuple(_idx(w) for w in weights) + tuple(_idx(b) for b in biases)
    assert len(parents) == 1 + 2 * n
    return tape.record("mlp", out, parents, vjp)


def primitive(name, inputs, value, vjp):
    """Record a custom node; ``vjp(g)`` returns one gradient per input."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(name, value, tuple(_idx(i) for i in inputs), vjp)


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    basic = all(isinstance(k, (slice, int, type(Ellipsis))) for k in
                (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return x.tape.record("getitem", np.array(out), (x.index,), vjp)


def concat(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return tape.record("concat", out, tuple(_idx(x) for x in xs), vjp)


def reshape(x, shape):
    xv = value_of(x)
    out = np.reshape(xv, shape)
    if not isinstance(x, Var):
        return out
    orig = xv.shape
    return x.tape.record("reshape", out, (x.index,), lambda g: (np.reshape(g, orig),))


def log_softmax(x, axis=-1):
    xv = value_of(x)
    m = np.max(xv, axis=axis, keepdims=True)
    shifted = xv - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    if not isinstance(x, Var):
        return out
    p = np.exp(out)
    return x.tape.record(
        "log_softmax", out, (x.index,),
        lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),),
    )


# -- parameters --------------------------------------------------------------

@dataclass
class ParamVector:
    """Flat float64 parameter array with named, disjoint, covering segments."""

    values: np.ndarray
    layout: dict = field(default_factory=dict)  # name -> (offset, shape)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        end = 0
        for name, (off, shape) in sorted(self.layout.items(), key=lambda kv: kv[1][0]):
            if off != end:
                raise ValueError(f"segment {name!r} leaves a gap or overlaps at offset {off}")
            end = off + int(np.prod(shape, dtype=np.int64))
        if end != self.values.size:
            raise ValueError("segments do not cover the parameter array")

    @classmethod
    def from_arrays(cls, items):
        """Build from an ordered iterable of ``(name, array)`` pairs."""
        layout, chunks, off = {}, [], 0
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            if name in layout:
                raise ValueError(f"duplicate segment {name!r}")
            layout[name] = (off, tuple(arr.shape))
            chunks.append(arr.ravel())
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @classmethod
    def concat(cls, parts):
        """Join ``{prefix: ParamVector}`` into one vector with prefixed names."""
        items = []
        for prefix, pv in parts.items():
            for name in pv.names():
                items.append((f"{prefix}.{name}", pv[name]))
        return cls.from_arrays(items)

    def split(self, prefix):
        """Inverse of ``concat`` for one prefix (returns a copy)."""
        head = prefix + "."
        return ParamVector.from_arrays(
            (name[len(head):], self[name]) for name in self.names() if name.startswith(head)
        )

    def names(self):
        return sorted(self.layout, key=lambda k: self.layout[k][0])

    def __len__(self):
        return self.values.size

    def __getitem__(self, name):
        off, shape = self.layout[name]
        n = int(np.prod(shape, dtype=np.int64))
        return self.values[off:off + n].reshape(shape)

    def copy(self):
        return ParamVector(self.values.copy(), dict(self.layout))

    def with_values(self, values):
        return ParamVector(np.array(values, dtype=np.float64), dict(self.layout))

    def view(self):
        return ParamView(self)


class ParamView:
    """Name -> array (or tape leaf) accessor handed to differentiable functions.

    Without a tape it returns read-only numpy views; with a tape each segment
    becomes a leaf the first time it is accessed.
    """

    def __init__(self, params, tape=None, prefix=""):
        self.params = params
        self.tape = tape
        self.prefix = prefix
        self._leaves = {} if prefix == "" else None
        self._parent = None

    def __getitem__(self, name):
        full = self.prefix + name
        if self.tape is None:
            return self.params[full]
        leaves = self._root_leaves()
        if full not in leaves:
            leaves[full] = self.tape.leaf(self.params[full], full)
        return leaves[full]

    def __contains__(self, name):
        return (self.prefix + name) in self.params.layout

    def sub(self, prefix):
        child = ParamView(self.params, self.tape, self.prefix + prefix + ".")
        child._parent = self if self._leaves is not None else self._parent
        return child

    def _root_leaves(self):
        return self._leaves if self._leaves is not None else self._parent._root_leaves()

    def leaves(self):
        return self._root_leaves()


def value_and_grad(f, p: ParamVector):
    """Return ``(f(p), df/dp)`` with ``f`` called on a taped :class:`ParamView`."""
    tape = Tape()
    view = ParamView(p, tape)
    out = f(view)
    grad = np.zeros_like(p.values)
    if not isinstance(out, Var):
        return float(np.asarray(out)), grad
    if out.value.size != 1:
        raise ValueError("value_and_grad needs a scalar-valued function")
    grads = tape.backward(out)
    for name, leaf in view.leaves().items():
        g = grads[leaf.index]
        if g is not None:
            off, shape = p.layout[name]
            grad[off:off + leaf.value.size] = np.reshape(g, -1)
    return float(out.value), grad


def finite_diff_grad(f, p: ParamVector, step=1e-5):
    """Central-difference gradient of ``f`` (evaluated on plain views)."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = p.values
    grad = np.empty_like(base)
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        fp = float(np.asarray(f(p.with_values(hi).view())))
        fm = float(np.asarray(f(p.with_values(lo).view())))
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


LOG_2PI = math.log(2.0 * math.pi)
