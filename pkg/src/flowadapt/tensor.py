"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is implicit in the tensors themselves: every operation
returns a fresh ``Tensor`` holding references to its inputs and a
vector-Jacobian product closure. Tensors are never mutated after creation,
and each tensor carries a monotonically increasing creation id, so sorting a
reachable set by id yields a valid topological order by construction. The
backward pass visits each node exactly once, in reverse creation order.

Gradient semantics: ``backward`` accumulates into ``.grad``. Grads are zeroed
explicitly (``SGD.zero_grad`` or ``Tensor.zero_grad``); calling ``backward``
twice without zeroing adds the two passes together.

Only float64 is supported. Broadcasting follows numpy rules; gradients of
broadcast operands are summed back down to the operand's shape.
"""

import itertools

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

_COUNTER = itertools.count()


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the autodiff graph: float64 data plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_op", "_nid")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjp=None, _op="leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._nid = next(_COUNTER)

    # -- basics --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self):
        """A copy of the underlying array (tensors are immutable by contract)."""
        return self.data.copy()

    def detach(self):
        """A constant tensor sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False, _op="detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{tag})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def backward(self, params=None):
        return backward(self, params=params)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name, _op="const")


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name, _op="param")


# -- graph construction ---------------------------------------------------


def _make(data, parents, vjp, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _vjp=vjp if needs else None, _op=op)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- primitive ops ---------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _make(out, (a, b), vjp, "mul")


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(out, (a,), vjp, "scale")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        return (g @ bd.T, ad.T @ g)

    return _make(out, (a, b), vjp, "matmul")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("exp", "argument too large")

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def log(a):
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("log", "argument outside (0, inf)")

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp, "log")


def tanh(a):
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0.0)

    def vjp(g):
        # subgradient 0 at the kink
        return (g * (ad > 0.0),)

    return _make(out, (a,), vjp, "relu")


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        ge = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def tensor_mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise ShapeError("mean", a.shape)
    n = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(out.copy(), (a,), vjp, "broadcast")


def mask_select(a, mask):
    """Select columns (last axis) where a binary/boolean mask is set."""
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.shape[0] != a.shape[-1]:
        raise ShapeError("mask_select", a.shape, mask.shape)
    sel = mask.astype(bool)
    out = a.data[..., sel]

    def vjp(g):
        full = np.zeros(a.shape)
        full[..., sel] = g
        return (full,)

    return _make(out, (a,), vjp, "mask_select")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", ())
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape,
                         tensors[-1].shape) from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


# -- backward --------------------------------------------------------------


def backward(loss, params=None):
    """Reverse-mode pass from a scalar loss.

    Accumulates into ``.grad`` of every requires_grad tensor reachable from
    ``loss``. Tensors listed in ``params`` but unreachable get zero grads.
    Returns a ``{name: grad}`` map for every named tensor that received one.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no tensor in its graph requires grad")

    # collect the reachable requires_grad subgraph (iterative DFS)
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda t: t._nid, reverse=True)

    # per-pass gradient buffers keep stale .grad values out of propagation
    flowing = {id(loss): np.ones(loss.shape)}
    for t in nodes:
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
        if t._vjp is None:
            continue
        for p, pg in zip(t._parents, t._vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg

    result = {}
    for t in nodes:
        if t.name is not None and t.grad is not None:
            result[t.name] = t.grad
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros(p.shape)
            if p.name is not None and p.grad is not None:
                result[p.name] = p.grad
    return result


# -- finite differences (test oracle) ---------------------------------------


def finite_difference_gradient(f, x, h=1e-6):
    """Central-difference gradient of a tensor-to-scalar function at ``x``.

    ``f`` receives a fresh constant Tensor and must return a scalar Tensor or
    float; ``x`` may be a Tensor or array. Independent of the backward pass by
    construction, so it serves as the gradient oracle throughout the tests.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = x.data if isinstance(x, Tensor) else _as_array(x)
    grad = np.zeros(base.shape)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += h
        hi = _eval_scalar(f, bumped.reshape(base.shape))
        bumped[i] -= 2 * h
        lo = _eval_scalar(f, bumped.reshape(base.shape))
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def _eval_scalar(f, arr):
    out = f(constant(arr))
    return out.item() if isinstance(out, Tensor) else float(out)
