"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Operations on :class:`Tensor` objects are recorded only while a
:class:`GradientTape` is active and at least one input requires gradients.
Outside a tape every op is a thin wrapper around the numpy call, so the same
code paths serve training and inference.

    with GradientTape() as tape:
        loss = ((x @ w) ** 2).mean()
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import math

import numpy as np

_ACTIVE: list = []
_LN2 = math.log(2.0)
_FLUSH = 1e-30


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Array value with an optional link into the active gradient tape."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data) if isinstance(data, np.generic) else np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def Parameter(data) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


def tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v))


class GradientTape:
    """Records differentiable ops executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, target: Tensor, sources) -> list:
        """Gradients of scalar ``target`` w.r.t. each source (zeros if unused)."""
        if target.data.size != 1:
            raise ValueError("gradient target must be a scalar")
        grads = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.data.dtype))
        return out


class pause:
    """Context manager that suspends recording on every active tape."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE[:] = self._saved
        return False


def backward(loss: Tensor, tape: GradientTape, params) -> list:
    return tape.gradient(loss, params)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        _ACTIVE[-1].nodes.append(out)
    return out


# elementwise binary ---------------------------------------------------------

def _operand(v):
    """(node, value) pair; Python scalars stay weakly typed to keep dtypes."""
    if isinstance(v, Tensor):
        return v, v.data
    if isinstance(v, (int, float)):
        return _CONST, v
    arr = np.asarray(v)
    return _CONST, arr


_CONST = Tensor(np.zeros(()))


def _shape(v):
    return np.shape(v)


def _ub(node, g, shape):
    return _unbroadcast(g, shape) if node.requires_grad else None


def add(a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    sa, sb = _shape(ad), _shape(bd)
    return _make(ad + bd, (na, nb),
                 lambda g: (_ub(na, g, sa), _ub(nb, g, sb)))


def sub(a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    sa, sb = _shape(ad), _shape(bd)
    return _make(ad - bd, (na, nb),
                 lambda g: (_ub(na, g, sa), _ub(nb, -g, sb)))


def mul(a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    return _make(ad * bd, (na, nb),
                 lambda g: (_unbroadcast(g * bd, _shape(ad)) if na.requires_grad else None,
                            _unbroadcast(g * ad, _shape(bd)) if nb.requires_grad else None))


def div(a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    out = ad / bd
    return _make(out, (na, nb),
                 lambda g: (_unbroadcast(g / bd, _shape(ad)) if na.requires_grad else None,
                            _unbroadcast(-g * out / bd, _shape(bd)) if nb.requires_grad else None))


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = tensor(a)
    ad = a.data
    if p == 2:
        return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def maximum(a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    pick = ad >= bd
    return _make(np.maximum(ad, bd), (na, nb),
                 lambda g: (_ub(na, np.where(pick, g, 0), _shape(ad)),
                            _ub(nb, np.where(pick, 0, g), _shape(bd))))


def where(cond, a, b) -> Tensor:
    (na, ad), (nb, bd) = _operand(a), _operand(b)
    cond = np.asarray(cond)
    return _make(np.where(cond, ad, bd), (na, nb),
                 lambda g: (_ub(na, np.where(cond, g, 0), _shape(ad)),
                            _ub(nb, np.where(cond, 0, g), _shape(bd))))


def atan2(y, x) -> Tensor:
    (ny, yd), (nx, xd) = _operand(y), _operand(x)
    r2 = np.maximum(xd * xd + yd * yd, 1e-30)
    return _make(np.arctan2(yd, xd), (ny, nx),
                 lambda g: (_ub(ny, g * xd / r2, _shape(yd)),
                            _ub(nx, -g * yd / r2, _shape(xd))))


# elementwise unary ----------------------------------------------------------

def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        # drop contributions below 1e-30: they only create slow denormals downstream
        return (g * np.where(out < _FLUSH, 0.0, out).astype(out.dtype, copy=False),)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def sin(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """log(1 + exp(beta x)) / beta written with tanh (fast, no underflow)."""
    return _softplus_parts(x, beta)[0]


def _softplus_parts(x: np.ndarray, beta: float):
    """(softplus, sigmoid(beta x)) sharing one tanh; in-place to limit allocation.

    With t = tanh(|bx| / 2): log(1 + exp(-|bx|)) = ln 2 - log(1 + t) and
    sigmoid(bx) = (1 + sign(bx) t) / 2.
    """
    x = np.asarray(x)
    if x.ndim == 0:
        sp, sig = _softplus_parts(x.reshape(1), beta)
        return sp.reshape(()), sig.reshape(())
    bx = np.multiply(x, beta)
    t = np.abs(bx)
    t *= 0.5
    np.tanh(t, out=t)
    sig = np.copysign(t, bx)
    sig += 1.0
    sig *= 0.5
    t += 1.0
    np.log(t, out=t)
    np.subtract(_LN2, t, out=t)
    np.maximum(bx, 0.0, out=bx)
    bx += t
    bx *= 1.0 / beta
    return bx, sig


def _flush(x: np.ndarray) -> np.ndarray:
    """Zero float32 magnitudes below 1e-30 (denormals make BLAS very slow)."""
    if isinstance(x, np.ndarray) and x.dtype == np.float32 and x.ndim:
        x[np.abs(x) < _FLUSH] = 0.0
    return x


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a, beta: float = 1.0) -> Tensor:
    return softplus_pair(a, beta)[0]


def softplus_slope(a, beta: float = 1.0) -> Tensor:
    """Derivative of softplus, sigmoid(beta a), as a differentiable op."""
    return softplus_pair(a, beta)[1]


def softplus_pair(a, beta: float = 1.0):
    """softplus(a) and its slope sigmoid(beta a) as two differentiable tensors."""
    a = tensor(a)
    sp, sig = _softplus_parts(a.data, beta)
    value = _make(sp, (a,), lambda g: (_flush(g * sig),))
    slope = _make(sig, (a,), lambda g: (g * (beta * sig * (1.0 - sig)),))
    return value, slope


def clip(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# linear algebra and reductions ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / max(int(n), 1))


def cumsum(a, axis: int = -1) -> Tensor:
    a = tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    shape, dtype = a.shape, a.data.dtype

    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def _is_basic(idx) -> bool:
    """Slices/ints only: selected elements are distinct, so plain assignment works."""
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def concat(items, axis: int = -1) -> Tensor:
    items = [tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in items], axis=axis), tuple(items),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items, axis: int = 0) -> Tensor:
    items = [tensor(t) for t in items]
    n = len(items)
    return _make(np.stack([t.data for t in items], axis=axis), tuple(items),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    return sqrt(tsum(a * a, axis=axis, keepdims=keepdims) + eps)
