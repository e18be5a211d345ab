"""Small reverse-mode engine over numpy arrays, plus forward-mode duals.

Every op accepts plain ``ndarray`` inputs and then returns a plain ``ndarray``
(no graph is recorded), so model code is written once and runs either eagerly
or on the tape depending on whether any input is a :class:`Var`.

The tape is implicit: each :class:`Var` holds its parents and a closure mapping
the upstream cotangent to parent cotangents. :func:`grad` walks that graph in
reverse topological order.
"""

import numpy as np

from .errors import NumericError, ShapeError


class Var:
    """A recorded value on the tape."""

    __slots__ = ("value", "parents", "vjp", "name")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def custom(value, parents, vjp, name=None):
    """Record an op whose backward rule is supplied by the caller.

    ``parents`` may contain constants; ``vjp(g)`` must return one cotangent per
    parent (``None`` is accepted for constants).
    """
    tracked = tuple(p for p in parents if isinstance(p, Var))
    if not tracked:
        return np.asarray(value, dtype=np.float64)
    mask = [isinstance(p, Var) for p in parents]

    def _vjp(g):
        grads = vjp(g)
        return tuple(gr for gr, keep in zip(grads, mask) if keep)

    return Var(value, tracked, _vjp, name=name)


# --------------------------------------------------------------------------
# elementwise binary ops
# --------------------------------------------------------------------------

def _binary(a, b, out, ga, gb):
    if not _any_var(a, b):
        return out
    av, bv = value_of(a), value_of(b)
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: _unbroadcast(ga(g), av.shape))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: _unbroadcast(gb(g), bv.shape))
    return Var(out, tuple(parents), lambda g: tuple(f(g) for f in fns))


def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(a):
    return _unary(a, -value_of(a), lambda g, x, y: -g)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    if not _any_var(a, b):
        return out
    return _binary(a, b, out, lambda g: g @ bv.T, lambda g: av.T @ g)


# --------------------------------------------------------------------------
# unary ops
# --------------------------------------------------------------------------

def _unary(a, out, gfn):
    if not isinstance(a, Var):
        return out
    x = a.value
    return Var(out, (a,), lambda g: (gfn(g, x, out),))


def transpose(a):
    return _unary(a, value_of(a).T, lambda g, x, y: g.T)


def reshape(a, shape):
    return _unary(a, value_of(a).reshape(shape), lambda g, x, y: g.reshape(x.shape))


def power(a, exponent):
    x = value_of(a)
    return _unary(a, x ** exponent, lambda g, x, y: g * exponent * x ** (exponent - 1))


def square(a):
    x = value_of(a)
    return _unary(a, x * x, lambda g, x, y: 2.0 * g * x)


def sqrt(a):
    return _unary(a, np.sqrt(value_of(a)), lambda g, x, y: g * 0.5 / y)


def exp(a):
    return _unary(a, np.exp(value_of(a)), lambda g, x, y: g * y)


def log(a):
    return _unary(a, np.log(value_of(a)), lambda g, x, y: g / x)


def tanh(a):
    return _unary(a, np.tanh(value_of(a)), lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a):
    x = value_of(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _unary(a, out, lambda g, x, y: g * y * (1.0 - y))


def softplus(a):
    x = value_of(a)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _unary(a, out, lambda g, x, y: g * 0.5 * (1.0 + np.tanh(0.5 * x)))


def elu(a):
    x = value_of(a)
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return _unary(a, out, lambda g, x, y: g * np.where(x > 0, 1.0, y + 1.0))


def minimum(a, b):
    """Elementwise minimum; the gradient goes to ``a`` where ``a < b``, else to ``b``."""
    av, bv = value_of(a), value_of(b)
    pick = (av < bv) | np.isnan(av)
    return _binary(a, b, np.minimum(av, bv), lambda g: g * pick, lambda g: g * ~pick)


def maximum(a, b):
    """Elementwise maximum; the gradient goes to ``a`` where ``a > b``, else to ``b``."""
    av, bv = value_of(a), value_of(b)
    pick = (av > bv) | np.isnan(av)
    return _binary(a, b, np.maximum(av, bv), lambda g: g * pick, lambda g: g * ~pick)


def sum_(a, axis=None):
    x = value_of(a)
    out = x.sum(axis=axis)

    def gfn(g, x, y):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return _unary(a, out, gfn)


def mean(a, axis=None):
    x = value_of(a)
    count = x.size if axis is None else x.shape[axis]
    return sum_(a, axis) / count


def take(a, index):
    x = value_of(a)

    def gfn(g, x, y):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return out

    return _unary(a, x[index], gfn)


def stack(items, axis=0):
    values = [value_of(v) for v in items]
    out = np.stack(values, axis=axis)
    if not _any_var(*items):
        return out
    parents = tuple(v for v in items if isinstance(v, Var))
    positions = [i for i, v in enumerate(items) if isinstance(v, Var)]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in positions)

    return Var(out, parents, vjp)


def logabsdet(a):
    """log|det A| for a stack of square matrices ``(..., d, d)``."""
    x = value_of(a)
    _, out = np.linalg.slogdet(x)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        inv_t = np.swapaxes(np.linalg.inv(x), -1, -2)
        return (g[..., None, None] * inv_t,)

    return Var(out, (a,), vjp)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, seed=None):
    """Propagate ``seed`` (default 1 for a scalar) from ``root``.

    Returns a dict ``id(node) -> cotangent`` covering every reachable node.
    """
    if seed is None:
        if root.value.size != 1:
            raise ShapeError("backward without a seed needs a scalar root")
        seed = np.ones_like(root.value)
    grads = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(loss, wrt):
    """Gradients of scalar ``loss`` with respect to each Var in ``wrt``.

    Parameters that do not influence the loss get exact zeros.
    """
    if not isinstance(loss, Var):
        return [np.zeros_like(value_of(p)) for p in wrt]
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        term = loss.name or "loss"
        raise NumericError(f"non-finite {term}: {float(loss.value)}", term=term)
    table = backward(loss)
    return [np.asarray(table.get(id(p), np.zeros_like(p.value)), dtype=np.float64) for p in wrt]


# --------------------------------------------------------------------------
# forward mode
# --------------------------------------------------------------------------

class Dual:
    """Primal/tangent pair for forward-mode differentiation of simple callables."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 1000

    def __init__(self, primal, tangent):
        self.primal = np.asarray(primal, dtype=np.float64)
        self.tangent = np.asarray(tangent, dtype=np.float64)

    @staticmethod
    def _split(other):
        if isinstance(other, Dual):
            return other.primal, other.tangent
        return np.asarray(other, dtype=np.float64), 0.0

    def __add__(self, other):
        p, t = self._split(other)
        return Dual(self.primal + p, self.tangent + t)

    __radd__ = __add__

    def __sub__(self, other):
        p, t = self._split(other)
        return Dual(self.primal - p, self.tangent - t)

    def __rsub__(self, other):
        p, t = self._split(other)
        return Dual(p - self.primal, t - self.tangent)

    def __mul__(self, other):
        p, t = self._split(other)
        return Dual(self.primal * p, self.tangent * p + self.primal * t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        p, t = self._split(other)
        return Dual(self.primal / p, (self.tangent * p - self.primal * t) / (p * p))

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __matmul__(self, other):
        if not isinstance(other, Dual):
            p = np.asarray(other, dtype=np.float64)
            return Dual(self.primal @ p, self.tangent @ p)
        return Dual(self.primal @ other.primal,
                    self.tangent @ other.primal + self.primal @ other.tangent)

    def __rmatmul__(self, other):
        p = np.asarray(other, dtype=np.float64)
        return Dual(p @ self.primal, p @ self.tangent)

    def apply(self, fn, dfn):
        y = fn(self.primal)
        return Dual(y, dfn(self.primal, y) * self.tangent)

    def tanh(self):
        return self.apply(np.tanh, lambda x, y: 1.0 - y * y)

    def exp(self):
        return self.apply(np.exp, lambda x, y: y)


def jvp(fn, x, v):
    """Jacobian-vector product ``J_fn(x) @ v`` by forward-mode propagation.

    ``fn`` may be a matrix (linear map), an object exposing ``jvp(x, v)``
    returning ``(f(x), Jv)``, or a callable written against :class:`Dual`
    arithmetic.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape[-1] != v.shape[-1]:
        raise ShapeError(f"tangent shape {v.shape} does not match point shape {x.shape}")
    if isinstance(fn, np.ndarray):
        if fn.ndim != 2 or fn.shape[1] != x.shape[-1]:
            raise ShapeError(f"linear map of shape {fn.shape} cannot act on {x.shape}")
        return v @ fn.T
    if hasattr(fn, "jvp"):
        return value_of(fn.jvp(x, v)[1])
    out = fn(Dual(x, v))
    if isinstance(out, Dual):
        return out.tangent + np.zeros_like(out.primal)
    return np.zeros_like(np.asarray(out, dtype=np.float64))
