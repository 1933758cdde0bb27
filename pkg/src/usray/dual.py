"""Vectorised forward-mode dual numbers.

A :class:`Dual` carries a value array together with a stack of tangents, one
per differentiated parameter: ``tan.shape == (P,) + val.shape``. A ``None``
tangent means "identically zero" and keeps the no-gradient path as cheap as
plain numpy. With only a handful of scene parameters, pushing tangents forward
through a replayed path batch is cheaper than taping it for a reverse sweep.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")
    __array_ufunc__ = None  # make ndarray <op> Dual defer to our reflected ops

    def __init__(self, val, tan=None):
        self.val = np.asarray(val, dtype=np.float64)
        if tan is not None:
            tan = np.asarray(tan, dtype=np.float64)
            want = (tan.shape[0],) + self.val.shape
            if tan.shape != want:
                tan = _expand(tan, self.val.ndim, self.val.shape)
        self.tan = tan

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, tan={'0' if self.tan is None else self.tan.shape})"

    def detach(self) -> "Dual":
        return Dual(self.val)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        tan = None if self.tan is None else self.tan[(slice(None),) + idx]
        return Dual(self.val[idx], tan)

    # comparisons act on values only
    def __lt__(self, o):
        return self.val < _v(o)

    def __le__(self, o):
        return self.val <= _v(o)

    def __gt__(self, o):
        return self.val > _v(o)

    def __ge__(self, o):
        return self.val >= _v(o)

    # -- arithmetic -------------------------------------------------------
    def __neg__(self):
        return Dual(-self.val, None if self.tan is None else -self.tan)

    def __add__(self, o):
        o = lift(o)
        val = self.val + o.val
        return Dual(val, _combine(val, (self, 1.0), (o, 1.0)))

    __radd__ = __add__

    def __sub__(self, o):
        o = lift(o)
        val = self.val - o.val
        return Dual(val, _combine(val, (self, 1.0), (o, -1.0)))

    def __rsub__(self, o):
        return lift(o) - self

    def __mul__(self, o):
        o = lift(o)
        val = self.val * o.val
        return Dual(val, _combine(val, (self, o.val), (o, self.val)))

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = lift(o)
        val = self.val / o.val
        return Dual(val, _combine(val, (self, 1.0 / o.val), (o, -val / o.val)))

    def __rtruediv__(self, o):
        return lift(o) / self

    def __pow__(self, k):
        if isinstance(k, Dual):
            raise TypeError("dual exponents are not supported")
        val = self.val**k
        return _unary(self, val, k * self.val ** (k - 1))


def _v(x):
    return x.val if isinstance(x, Dual) else x


def _expand(tan, ndim, shape):
    # right-align the value dims of `tan` against `shape`
    p = tan.shape[0]
    t = tan.reshape((p,) + (1,) * (len(shape) - (tan.ndim - 1)) + tan.shape[1:])
    return np.broadcast_to(t, (p,) + tuple(shape))


def _combine(val, *terms):
    """Sum of ``tan_i * factor_i`` over the terms that carry a tangent."""
    out = None
    for d, f in terms:
        if d.tan is None:
            continue
        t = _expand(d.tan, d.val.ndim, np.broadcast_shapes(d.val.shape, val.shape)) * f
        out = t if out is None else out + t
    if out is None:
        return None
    return np.broadcast_to(out, (out.shape[0],) + val.shape)


def _unary(x: Dual, val, dval):
    if x.tan is None:
        return Dual(val)
    return Dual(val, x.tan * dval)


def lift(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x)


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def seed(values, n_params: int | None = None) -> list[Dual]:
    """Independent scalar variables, one unit tangent direction each."""
    values = [float(v) for v in values]
    p = len(values) if n_params is None else n_params
    eye = np.eye(p)
    return [Dual(v, eye[i]) for i, v in enumerate(values)]


def constant(v, n_params: int) -> Dual:
    return Dual(v, np.zeros((n_params,) + np.shape(v)))


# -- elementwise functions ----------------------------------------------------


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    val = np.sqrt(x.val)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(x, val, 0.5 / val)


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    val = np.exp(x.val)
    return _unary(x, val, val)


def log(x):
    if not isinstance(x, Dual):
        return np.log(x)
    return _unary(x, np.log(x.val), 1.0 / x.val)


def sin(x):
    if not isinstance(x, Dual):
        return np.sin(x)
    return _unary(x, np.sin(x.val), np.cos(x.val))


def cos(x):
    if not isinstance(x, Dual):
        return np.cos(x)
    return _unary(x, np.cos(x.val), -np.sin(x.val))


def arccos(x):
    if not isinstance(x, Dual):
        return np.arccos(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(x, np.arccos(x.val), -1.0 / np.sqrt(1.0 - x.val**2))


def arctan2(y, x):
    """Angle of ``(x, y)``; unlike ``arccos`` its derivative stays finite on axis."""
    if not isinstance(y, Dual) and not isinstance(x, Dual):
        return np.arctan2(y, x)
    y, x = lift(y), lift(x)
    val = np.arctan2(y.val, x.val)
    r2 = x.val * x.val + y.val * y.val
    return Dual(val, _combine(val, (y, x.val / r2), (x, -y.val / r2)))


def absolute(x):
    if not isinstance(x, Dual):
        return np.abs(x)
    return _unary(x, np.abs(x.val), np.sign(x.val))


def where(cond, a, b) -> Dual:
    a, b = lift(a), lift(b)
    val = np.where(cond, a.val, b.val)
    if a.tan is None and b.tan is None:
        return Dual(val)
    p = (a.tan if a.tan is not None else b.tan).shape[0]
    ta = _expand(a.tan, a.ndim, val.shape) if a.tan is not None else np.zeros((p,) + val.shape)
    tb = _expand(b.tan, b.ndim, val.shape) if b.tan is not None else np.zeros((p,) + val.shape)
    return Dual(val, np.where(cond, ta, tb))


def concatenate(parts, n_params: int | None = None) -> Dual:
    parts = [lift(p) for p in parts]
    val = np.concatenate([p.val for p in parts]) if parts else np.zeros(0)
    if all(p.tan is None for p in parts):
        return Dual(val)
    p_ = n_params or next(p.tan.shape[0] for p in parts if p.tan is not None)
    tans = [p.tan if p.tan is not None else np.zeros((p_,) + p.shape) for p in parts]
    return Dual(val, np.concatenate(tans, axis=1))


def broadcast(x, shape) -> Dual:
    """Give a (possibly scalar) dual an explicit array shape."""
    x = lift(x)
    val = np.broadcast_to(x.val, shape)
    if x.tan is None:
        return Dual(val)
    return Dual(val, _expand(x.tan, x.ndim, shape))


def assemble(n: int, pieces) -> Dual:
    """Scatter ``(index, dual)`` pieces into a length-``n`` dual (zeros elsewhere)."""
    pieces = [(idx, lift(d)) for idx, d in pieces]
    val = np.zeros(n)
    p = next((d.tan.shape[0] for _, d in pieces if d.tan is not None), None)
    tan = None if p is None else np.zeros((p, n))
    for idx, d in pieces:
        val[idx] = d.val
        if d.tan is not None:
            tan[:, idx] = d.tan
    return Dual(val, tan)


def stack_scalars(items) -> Dual:
    """Pack scalar duals into one 1-D dual so it can be gathered by index."""
    items = [lift(x) for x in items]
    val = np.array([float(x.val) for x in items])
    p = next((x.tan.shape[0] for x in items if x.tan is not None), None)
    if p is None:
        return Dual(val)
    tan = np.stack([x.tan if x.tan is not None else np.zeros(p) for x in items], axis=1)
    return Dual(val, tan)
