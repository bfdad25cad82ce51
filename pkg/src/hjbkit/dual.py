"""Vectorized forward-mode automatic differentiation.

A :class:`Dual` carries a value array and one tangent per seed direction.
Numpy ufuncs dispatch to it through ``__array_ufunc__``, so model code
written with ``np.sin``, ``np.exp`` and ordinary arithmetic can be
differentiated without modification::

    >>> value, grad = dual_diff(lambda x: 0.5 * (x * x).sum(axis=0), np.array([1.0, 2.0]))
    >>> value, grad
    (2.5, array([1., 2.]))

Tangents are stored with the direction axis first: ``der.shape == (k,) + val.shape``.
"""

import numpy as np

from .errors import NonFiniteValue

__all__ = ["Dual", "dual_diff", "stack", "value_of"]


def _lift(der, ndim):
    # der has shape (k,) + s; left-pad s with singleton axes up to ndim
    pad = ndim - (der.ndim - 1)
    if pad <= 0:
        return der
    return der.reshape((der.shape[0],) + (1,) * pad + der.shape[1:])


class Dual:
    __slots__ = ("val", "der")
    # make numpy defer to us in mixed binary operations
    __array_priority__ = 1000

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def nseed(self):
        return self.der.shape[0]

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return _new(self.val[idx], self.der[(slice(None),) + idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.val.sum(), self.der.reshape(self.nseed, -1).sum(axis=1))
        axis = axis % self.val.ndim
        return Dual(self.val.sum(axis=axis), self.der.sum(axis=axis + 1))

    # Fast paths cover same-shape Duals and scalars/arrays that do not add
    # dimensions; everything else goes through the ufunc machinery below.
    def _compatible(self, other):
        if isinstance(other, Dual):
            return other.val.shape == self.val.shape
        if isinstance(other, (float, int)):
            return True
        return isinstance(other, np.ndarray) and other.ndim <= self.val.ndim and other.shape == self.val.shape[self.val.ndim - other.ndim:]

    def __add__(self, other):
        if self._compatible(other):
            if isinstance(other, Dual):
                return _new(self.val + other.val, self.der + other.der)
            return _new(self.val + other, self.der)
        return np.add(self, other)

    def __radd__(self, other):
        if self._compatible(other):
            return _new(self.val + other, self.der)
        return np.add(other, self)

    def __sub__(self, other):
        if self._compatible(other):
            if isinstance(other, Dual):
                return _new(self.val - other.val, self.der - other.der)
            return _new(self.val - other, self.der)
        return np.subtract(self, other)

    def __rsub__(self, other):
        if self._compatible(other):
            return _new(other - self.val, -self.der)
        return np.subtract(other, self)

    def __mul__(self, other):
        if self._compatible(other):
            if isinstance(other, Dual):
                return _new(self.val * other.val, self.der * other.val + other.der * self.val)
            return _new(self.val * other, self.der * other)
        return np.multiply(self, other)

    def __rmul__(self, other):
        if self._compatible(other):
            return _new(self.val * other, self.der * other)
        return np.multiply(other, self)

    def __truediv__(self, other):
        if self._compatible(other):
            if isinstance(other, Dual):
                val = self.val / other.val
                return _new(val, (self.der - other.der * val) / other.val)
            return _new(self.val / other, self.der / other)
        return np.true_divide(self, other)

    def __rtruediv__(self, other):
        return np.true_divide(other, self)

    def __pow__(self, other):
        return np.power(self, other)

    def __rpow__(self, other):
        return np.power(other, self)

    def __neg__(self):
        return _new(-self.val, -self.der)

    def __pos__(self):
        return self

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        handler = _UFUNCS.get(ufunc)
        if handler is None:
            return NotImplemented
        return handler(*inputs)


def _new(val, der):
    out = object.__new__(Dual)
    out.val = val
    out.der = der
    return out


def _parts(a):
    if isinstance(a, Dual):
        return a.val, a.der
    return np.asarray(a, dtype=float), None


def _binary(a, b, val, da_coef, db_coef):
    """Combine tangents: d(result) = da_coef * da + db_coef * db."""
    av, ad = _parts(a)
    bv, bd = _parts(b)
    ndim = np.ndim(val)
    der = None
    if ad is not None:
        der = _lift(ad, ndim) * da_coef
    if bd is not None:
        term = _lift(bd, ndim) * db_coef
        der = term if der is None else der + term
    k = der.shape[0]
    return Dual(val, np.broadcast_to(der, (k,) + np.shape(val)))


def _add(a, b):
    av, _ = _parts(a)
    bv, _ = _parts(b)
    return _binary(a, b, av + bv, 1.0, 1.0)


def _sub(a, b):
    av, _ = _parts(a)
    bv, _ = _parts(b)
    return _binary(a, b, av - bv, 1.0, -1.0)


def _mul(a, b):
    av, _ = _parts(a)
    bv, _ = _parts(b)
    return _binary(a, b, av * bv, bv, av)


def _div(a, b):
    av, _ = _parts(a)
    bv, _ = _parts(b)
    val = av / bv
    return _binary(a, b, val, 1.0 / bv, -val / bv)


def _power(a, b):
    av, _ = _parts(a)
    bv, bd = _parts(b)
    if bd is None:
        val = av**bv
        return _binary(a, b, val, bv * av ** (bv - 1.0), 0.0)
    val = av**bv
    with np.errstate(divide="ignore", invalid="ignore"):
        dlog = np.where(av > 0, np.log(np.where(av > 0, av, 1.0)), 0.0)
    return _binary(a, b, val, bv * av ** (bv - 1.0), val * dlog)


def _unary(fn, dfn):
    def op(a):
        return _new(fn(a.val), a.der * dfn(a.val))

    return op


def _neg(a):
    return -a


_UFUNCS = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.power: _power,
    np.negative: _neg,
    np.sin: _unary(np.sin, np.cos),
    np.cos: _unary(np.cos, lambda v: -np.sin(v)),
    np.tan: _unary(np.tan, lambda v: 1.0 / np.cos(v) ** 2),
    np.exp: _unary(np.exp, np.exp),
    np.log: _unary(np.log, lambda v: 1.0 / v),
    np.sqrt: _unary(np.sqrt, lambda v: 0.5 / np.sqrt(v)),
    np.square: _unary(np.square, lambda v: 2.0 * v),
    np.tanh: _unary(np.tanh, lambda v: 1.0 - np.tanh(v) ** 2),
    np.arctan: _unary(np.arctan, lambda v: 1.0 / (1.0 + v * v)),
}


def value_of(a):
    return a.val if isinstance(a, Dual) else np.asarray(a, dtype=float)


def stack(items, axis=0):
    """``np.stack`` that also accepts Duals (all sharing a seed count)."""
    items = list(items)
    if not any(isinstance(it, Dual) for it in items):
        return np.stack([np.asarray(it, dtype=float) for it in items], axis=axis)
    k = next(it.nseed for it in items if isinstance(it, Dual))
    shape = np.broadcast_shapes(*(np.shape(value_of(it)) for it in items))
    vals, ders = [], []
    for it in items:
        v, d = _parts(it)
        vals.append(np.broadcast_to(v, shape))
        if d is None:
            ders.append(np.zeros((k,) + shape))
        else:
            ders.append(np.broadcast_to(_lift(d, len(shape)), (k,) + shape))
    ax = axis if axis >= 0 else axis + len(shape) + 1
    return Dual(np.stack(vals, axis=ax), np.stack(ders, axis=ax + 1))


def seed(x):
    """Wrap ``x`` of shape ``(k, ...)`` as a Dual seeded with the identity."""
    x = np.asarray(x, dtype=float)
    k = x.shape[0]
    eye = np.eye(k).reshape((k, k) + (1,) * (x.ndim - 1))
    return Dual(x, np.broadcast_to(eye, (k,) + x.shape))


def dual_diff(g, x):
    """Value and exact gradient of ``g`` at ``x``.

    ``x`` has shape ``(k, ...)``; trailing axes are independent evaluation
    points, so ``g`` must treat ``x[i]`` as the i-th coordinate array. The
    gradient has shape ``(k,) + value.shape``.
    """
    out = g(seed(x))
    if isinstance(out, Dual):
        val, der = out.val, out.der
    else:
        # g ignored its argument
        val = np.asarray(out, dtype=float)
        der = np.zeros((np.shape(x)[0],) + val.shape)
    if not (np.all(np.isfinite(val)) and np.all(np.isfinite(der))):
        raise NonFiniteValue("non-finite value or derivative in dual_diff")
    if val.ndim == 0:
        return float(val), np.array(der, dtype=float)
    return val, np.array(der, dtype=float)
