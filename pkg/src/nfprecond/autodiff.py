"""Tape-based reverse-mode autodiff over numpy arrays, with exact HVPs.

Hessian-vector products are forward-over-reverse: the traced function is
evaluated on :class:`Dual` values carrying a tangent ``v``, and the ordinary
reverse sweep then yields ``(grad, H v)`` in one pass. Every backward rule is
written with operators that :class:`Dual` overloads, so the same rules serve
both modes.
"""
import functools
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, NumericFailure


class Dual:
    """An array paired with a tangent of the same shape."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __slots__ = ("p", "t")

    def __init__(self, p, t):
        self.p = np.asarray(p, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64)

    shape = property(lambda self: self.p.shape)
    ndim = property(lambda self: self.p.ndim)
    size = property(lambda self: self.p.size)
    T = property(lambda self: Dual(self.p.T, self.t.T))

    def __repr__(self):
        return f"Dual(p={self.p!r}, t={self.t!r})"

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p + o.p, self.t + o.t)
        return Dual(self.p + o, self.t)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p - o.p, self.t - o.t)
        return Dual(self.p - o, self.t)

    def __rsub__(self, o):
        return Dual(o - self.p, -self.t)

    def __neg__(self):
        return Dual(-self.p, -self.t)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p * o.p, self.t * o.p + self.p * o.t)
        return Dual(self.p * o, self.t * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.p / o.p
            return Dual(q, (self.t - q * o.t) / o.p)
        return Dual(self.p / o, self.t / o)

    def __rtruediv__(self, o):
        q = o / self.p
        return Dual(q, -q * self.t / self.p)

    def __matmul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.p @ o.p, self.t @ o.p + self.p @ o.t)
        return Dual(self.p @ o, self.t @ o)

    def __rmatmul__(self, o):
        return Dual(o @ self.p, o @ self.t)

    def __getitem__(self, idx):
        return Dual(self.p[idx], self.t[idx])

    def sum(self, axis=None, keepdims=False):
        return Dual(self.p.sum(axis=axis, keepdims=keepdims),
                    self.t.sum(axis=axis, keepdims=keepdims))

    def reshape(self, *shape):
        return Dual(self.p.reshape(*shape), self.t.reshape(*shape))


def primal(x):
    return x.p if isinstance(x, Dual) else x


def _zeros_like(x):
    if isinstance(x, Dual):
        return Dual(np.zeros_like(x.p), np.zeros_like(x.t))
    return np.zeros_like(x)


def _scatter(template, idx, g):
    out = _zeros_like(template)
    if isinstance(out, Dual):
        if isinstance(g, Dual):
            out.p[idx] = g.p
            out.t[idx] = g.t
        else:
            out.p[idx] = g
    else:
        out[idx] = g
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive operations


class Op:
    name = "op"

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, ctx, g, xs):
        raise NotImplementedError


class Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def backward(self, ctx, g, xs):
        a, b = xs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b, None

    def backward(self, ctx, g, xs):
        a, b = xs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b, None

    def backward(self, ctx, g, xs):
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b, None

    def backward(self, ctx, g, xs):
        a, b = xs
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-(ga * a) / b, b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a, None

    def backward(self, ctx, g, xs):
        return (-g,)


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        return a @ b, None

    def backward(self, ctx, g, xs):
        a, b = xs
        return g @ b.T, a.T @ g


class Transpose(Op):
    name = "transpose"

    def forward(self, a):
        return a.T, None

    def backward(self, ctx, g, xs):
        return (g.T,)


class Sum(Op):
    name = "sum"

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        return a.sum(axis=self.axis), None

    def backward(self, ctx, g, xs):
        (a,) = xs
        if self.axis is not None:
            g = g.reshape(*np.expand_dims(primal(a).sum(axis=self.axis), self.axis).shape)
        ones = np.ones(a.shape)
        return (g * ones,)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return a.reshape(*self.shape), None

    def backward(self, ctx, g, xs):
        return (g.reshape(*xs[0].shape),)


class GetItem(Op):
    name = "getitem"

    def __init__(self, idx):
        self.idx = idx

    def forward(self, a):
        return a[self.idx], None

    def backward(self, ctx, g, xs):
        return (_scatter(xs[0], self.idx, g),)


class Elementwise(Op):
    """Scalar function applied componentwise, evaluated by a fused kernel.

    The kernel returns f, f' and (in tangent mode) f'' in one pass; the
    derivatives are cached in ``ctx`` for the backward sweep.
    """

    def __init__(self, code, p1=1.0, p2=1.0, name="elementwise"):
        self.code, self.p1, self.p2, self.name = code, float(p1), float(p2), name

    def forward(self, a):
        if isinstance(a, Dual):
            f, d1, d2 = kernels.activation(self.code, self.p1, self.p2, a.p, 2)
            return Dual(f, d1 * a.t), (d1, d2, a.t)
        f, d1, _ = kernels.activation(self.code, self.p1, self.p2, a, 1)
        return f, (d1, None, None)

    def backward(self, ctx, g, xs):
        d1, d2, at = ctx
        if isinstance(g, Dual):
            if d2 is None:
                return (Dual(g.p * d1, g.t * d1),)
            return (Dual(g.p * d1, g.t * d1 + g.p * d2 * at),)
        if d2 is not None:
            # primal adjoint against a tangent-carrying input
            return (Dual(g * d1, g * d2 * at),)
        return (g * d1,)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: Op | None
    inputs: tuple
    value: object
    ctx: object
    requires_grad: bool
    name: str = ""


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True, name="leaf"):
        if not isinstance(value, Dual):
            value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(None, (), value, None, requires_grad, name))
        return Var(self, len(self.nodes) - 1)

    def const(self, value):
        return self.leaf(value, requires_grad=False, name="const")

    def apply(self, op, *inputs):
        vars_ = [x if isinstance(x, Var) else self.const(x) for x in inputs]
        for v in vars_:
            if v.tape is not self:
                raise ConfigError("operands belong to different tapes")
        vals = [self.nodes[v.index].value for v in vars_]
        out, ctx = op.forward(*vals)
        rg = any(self.nodes[v.index].requires_grad for v in vars_)
        self.nodes.append(Node(op, tuple(v.index for v in vars_), out, ctx, rg, op.name))
        return Var(self, len(self.nodes) - 1)

    def backward(self, out, seed=None):
        """Adjoints of every node with respect to scalar node ``out``."""
        adj = [None] * len(self.nodes)
        if seed is None:
            val = self.nodes[out.index].value
            seed = Dual(np.ones(val.shape), np.zeros(val.shape)) if isinstance(val, Dual) \
                else np.ones(np.shape(val))
        adj[out.index] = seed
        for i in range(out.index, -1, -1):
            node = self.nodes[i]
            g = adj[i]
            if g is None or node.op is None or not node.requires_grad:
                continue
            xs = [self.nodes[j].value for j in node.inputs]
            grads = node.op.backward(node.ctx, g, xs)
            for j, gj in zip(node.inputs, grads):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        return adj

    def replay(self, leaves=None):
        """Re-run the forward pass, optionally with new leaf values."""
        leaves = leaves or {}
        vals = []
        for i, node in enumerate(self.nodes):
            if node.op is None:
                vals.append(leaves.get(i, node.value))
            else:
                out, _ = node.op.forward(*(vals[j] for j in node.inputs))
                vals.append(out)
        return vals

    def first_nonfinite(self):
        for i, node in enumerate(self.nodes):
            if not _finite(node.value):
                return i
        return None


def _finite(x):
    if isinstance(x, Dual):
        return bool(np.isfinite(x.p).all() and np.isfinite(x.t).all())
    return bool(np.isfinite(x).all())


class Var:
    """Handle to a tape node; supports the arithmetic used by the models."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def T(self):
        return self.tape.apply(Transpose(), self)

    def __add__(self, o):
        return self.tape.apply(Add(), self, o)

    def __radd__(self, o):
        return self.tape.apply(Add(), o, self)

    def __sub__(self, o):
        return self.tape.apply(Sub(), self, o)

    def __rsub__(self, o):
        return self.tape.apply(Sub(), o, self)

    def __mul__(self, o):
        return self.tape.apply(Mul(), self, o)

    def __rmul__(self, o):
        return self.tape.apply(Mul(), o, self)

    def __truediv__(self, o):
        return self.tape.apply(Div(), self, o)

    def __rtruediv__(self, o):
        return self.tape.apply(Div(), o, self)

    def __neg__(self):
        return self.tape.apply(Neg(), self)

    def __matmul__(self, o):
        return self.tape.apply(MatMul(), self, o)

    def __rmatmul__(self, o):
        return self.tape.apply(MatMul(), o, self)

    def __getitem__(self, idx):
        return self.tape.apply(GetItem(idx), self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply(Reshape(shape), self)

    def sum(self, axis=None):
        return self.tape.apply(Sum(axis), self)

    def mean(self):
        return self.sum() * (1.0 / float(np.prod(self.shape)))


def elementwise(x, code, p1=1.0, p2=1.0, name="elementwise"):
    """Apply kernel function ``code`` to a Var or a plain array."""
    op = Elementwise(code, p1, p2, name)
    if isinstance(x, Var):
        return x.tape.apply(op, x)
    return op.forward(x)[0]


def mean(x):
    if isinstance(x, Var):
        return x.mean()
    return x.mean()


# ---------------------------------------------------------------------------
# parameter vectors


class LayoutEntry(NamedTuple):
    layer: int
    role: str
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector plus the per-layer weight/bias layout."""

    flat: np.ndarray
    layout: tuple

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.ndim != 1:
            raise ConfigError("flat parameter array must be 1-D")
        pos = 0
        for e in self.layout:
            if e.offset != pos:
                raise ConfigError(f"layout gap/overlap at layer {e.layer} {e.role}")
            pos += e.size
        if pos != flat.size:
            raise ConfigError(f"layout covers {pos} entries, flat has {flat.size}")
        object.__setattr__(self, "flat", flat)

    @property
    def size(self):
        return self.flat.size

    def views(self):
        return [self.flat[e.slice].reshape(e.shape) for e in self.layout]

    def with_flat(self, flat):
        return ParamVector(np.asarray(flat, dtype=np.float64), self.layout)

    @classmethod
    def from_views(cls, layout, arrays):
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]) \
            if arrays else np.zeros(0)
        return cls(flat, tuple(layout))

    @staticmethod
    def build_layout(shapes: Sequence[tuple]):
        """``shapes`` is a sequence of (layer, role, shape)."""
        out, off = [], 0
        for layer, role, shape in shapes:
            e = LayoutEntry(layer, role, off, tuple(shape))
            out.append(e)
            off += e.size
        return tuple(out)


def _flat_of(params):
    if isinstance(params, ParamVector):
        return params.flat
    return np.asarray(params, dtype=np.float64)


# ---------------------------------------------------------------------------
# public derivative API

LossFn = Callable[[Var], Var]


def _quiet(fn):
    """Silence numpy overflow warnings; non-finite results raise instead."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(all="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _trace(loss_fn, theta_value):
    tape = Tape()
    theta = tape.leaf(theta_value, name="theta")
    loss = loss_fn(theta)
    if not isinstance(loss, Var):
        # constant function of theta
        loss = tape.const(loss) + theta.sum() * 0.0
    if np.size(primal(loss.value)) != 1:
        raise ConfigError("loss function must return a scalar")
    return tape, theta, loss


def _fail(tape, what):
    idx = tape.first_nonfinite()
    op = tape.nodes[idx].name if idx is not None else None
    where = f" (first at tape node {idx}, op {op})" if idx is not None else ""
    raise NumericFailure(f"non-finite {what}{where}", node=idx, op=op)


@_quiet
def value(loss_fn: LossFn, params):
    """Loss value only; no backward sweep."""
    _, _, loss = _trace(loss_fn, _flat_of(params).copy())
    return float(np.asarray(loss.value).reshape(()))


@_quiet
def value_and_grad(loss_fn: LossFn, params):
    """Loss value and gradient at ``params``."""
    tape, theta, loss = _trace(loss_fn, _flat_of(params).copy())
    val = float(np.asarray(loss.value).reshape(()))
    if not np.isfinite(val):
        _fail(tape, "loss")
    g = tape.backward(loss)[theta.index]
    if g is None:
        g = np.zeros_like(theta.value)
    if not np.isfinite(g).all():
        _fail(tape, "gradient")
    return val, np.asarray(g, dtype=np.float64)


def grad(loss_fn: LossFn, params):
    return value_and_grad(loss_fn, params)[1]


@_quiet
def value_grad_hvp(loss_fn: LossFn, params, v):
    """Loss, gradient and exact Hessian-vector product in one traced pass."""
    flat = _flat_of(params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != flat.shape:
        raise ConfigError(f"direction has shape {v.shape}, params {flat.shape}")
    if not np.any(v):
        raise ValueError("hvp direction must be non-zero")
    tape, theta, loss = _trace(loss_fn, Dual(flat.copy(), v.copy()))
    val = float(primal(loss.value).reshape(()))
    if not np.isfinite(val):
        _fail(tape, "loss")
    adj = tape.backward(loss)[theta.index]
    if adj is None:
        adj = Dual(np.zeros_like(flat), np.zeros_like(flat))
    if not isinstance(adj, Dual):
        adj = Dual(adj, np.zeros_like(flat))
    if not (np.isfinite(adj.p).all() and np.isfinite(adj.t).all()):
        _fail(tape, "gradient or Hessian-vector product")
    return val, adj.p.copy(), adj.t.copy()


def hvp(loss_fn: LossFn, params, v):
    """H(theta) v, exact to rounding."""
    return value_grad_hvp(loss_fn, params, v)[2]


def hvp_fd_oracle(loss_fn: LossFn, params, v, eps=1e-5):
    """Central difference of gradients along ``v``; a test oracle only."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = _flat_of(params)
    v = np.asarray(v, dtype=np.float64)
    gp = grad(loss_fn, flat + eps * v)
    gm = grad(loss_fn, flat - eps * v)
    return (gp - gm) / (2.0 * eps)


def grad_fd_oracle(loss_fn: LossFn, params, eps=1e-5):
    """Central-difference gradient, one coordinate at a time."""
    flat = _flat_of(params)
    out = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        out[i] = (value(loss_fn, flat + e) - value(loss_fn, flat - e)) / (2.0 * eps)
    return out
