"""Forward-mode dual numbers over numpy arrays.

A :class:`Jet` carries a primal array ``val`` and a tangent array ``dot`` whose
trailing axis indexes the seeded input directions.  The simulator is written
against plain numpy ufuncs plus the structural helpers in this module, so the
same code evaluates either plain arrays (fast forward path) or jets (which
yields exact local Jacobians for the reverse-mode tape).

Branches (``where``, ``maximum``, ``minimum``) are decided on primal values;
tangents follow the taken branch only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Jet",
    "value",
    "is_jet",
    "seed",
    "tangent",
    "stack",
    "concatenate",
    "where",
    "einsum",
    "solve",
    "cross",
    "take",
    "sum",
    "zeros_like",
]


class Jet:
    __slots__ = ("val", "dot")
    __array_priority__ = 1000

    def __init__(self, val, dot):
        self.val = np.asarray(val, dtype=float)
        self.dot = np.asarray(dot, dtype=float)
        if self.dot.shape[:-1] != self.val.shape:
            self.dot = np.broadcast_to(self.dot, self.val.shape + self.dot.shape[-1:])

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def ntan(self) -> int:
        return self.dot.shape[-1]

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Jet(val={self.val!r}, ntan={self.ntan})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            didx = idx + (slice(None),)
        else:
            didx = idx
        return Jet(self.val[idx], self.dot[didx])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        v = self.val.reshape(shape)
        return Jet(v, self.dot.reshape(v.shape + (self.ntan,)))

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        if ufunc in _PRIMAL_ONLY:
            return ufunc(*(value(x) for x in inputs))
        rule = _RULES.get(ufunc)
        if rule is None:
            return NotImplemented
        return rule(*inputs)

    # operators route through the ufunc table
    def __add__(self, o):
        return np.add(self, o)

    def __radd__(self, o):
        return np.add(o, self)

    def __sub__(self, o):
        return np.subtract(self, o)

    def __rsub__(self, o):
        return np.subtract(o, self)

    def __mul__(self, o):
        return np.multiply(self, o)

    def __rmul__(self, o):
        return np.multiply(o, self)

    def __truediv__(self, o):
        return np.divide(self, o)

    def __rtruediv__(self, o):
        return np.divide(o, self)

    def __neg__(self):
        return np.negative(self)

    def __pos__(self):
        return self

    def __pow__(self, p):
        return np.power(self, p)

    def __lt__(self, o):
        return self.val < value(o)

    def __le__(self, o):
        return self.val <= value(o)

    def __gt__(self, o):
        return self.val > value(o)

    def __ge__(self, o):
        return self.val >= value(o)


def value(x):
    """Primal part of ``x`` (identity for non-jets)."""
    return x.val if isinstance(x, Jet) else x


def is_jet(x) -> bool:
    return isinstance(x, Jet)


def tangent(x, ntan: int | None = None):
    """Tangent of ``x``; zeros of width ``ntan`` for constants."""
    if isinstance(x, Jet):
        return x.dot
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (ntan,))


def seed(val, offset: int, ntan: int) -> Jet:
    """Jet whose last axis is seeded with identity tangents at ``offset``."""
    val = np.asarray(val, dtype=float)
    n = val.shape[-1]
    dot = np.zeros(val.shape + (ntan,))
    idx = np.arange(n)
    dot[..., idx, offset + idx] = 1.0
    return Jet(val, dot)


def _parts(x):
    if isinstance(x, Jet):
        return x.val, x.dot
    return np.asarray(x, dtype=float), None


def _fit(d, shape):
    if d is None or d.shape[:-1] == shape:
        return d
    return np.broadcast_to(d, shape + d.shape[-1:])


def _make(val, *terms):
    total = None
    for t in terms:
        if t is None:
            continue
        total = t if total is None else total + t
    if total is None:
        return val
    return Jet(val, _fit(total, np.shape(val)))


def _ntan(*xs):
    for x in xs:
        if isinstance(x, Jet):
            return x.ntan
    return None


# ---------------------------------------------------------------- ufunc rules


def _unary(f, df):
    def rule(x):
        v, d = _parts(x)
        out = f(v)
        return _make(out, df(v, out)[..., None] * d)

    return rule


def _add(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    return _make(av + bv, ad, bd)


def _sub(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    return _make(av - bv, ad, None if bd is None else -bd)


def _mul(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    return _make(
        av * bv,
        None if ad is None else ad * bv[..., None],
        None if bd is None else av[..., None] * bd,
    )


def _div(a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    out = av / bv
    return _make(
        out,
        None if ad is None else ad / bv[..., None],
        None if bd is None else -(out / bv)[..., None] * bd,
    )


def _power(a, p):
    if isinstance(p, Jet):
        raise TypeError("Jet exponents are not supported")
    av, ad = _parts(a)
    p = np.asarray(p, dtype=float)
    return _make(av**p, (p * av ** (p - 1.0))[..., None] * ad)


def _pick(mask, a, b):
    av, ad = _parts(a)
    bv, bd = _parts(b)
    out = np.where(mask, av, bv)
    if ad is None and bd is None:
        return out
    k = ad.shape[-1] if ad is not None else bd.shape[-1]
    ad = 0.0 if ad is None else ad
    bd = 0.0 if bd is None else bd
    dot = np.where(mask[..., None], ad, bd)
    return Jet(out, _fit(np.broadcast_to(dot, dot.shape[:-1] + (k,)), out.shape))


def _maximum(a, b):
    # tie -> first argument
    return _pick(value(a) >= value(b), a, b)


def _minimum(a, b):
    return _pick(value(a) <= value(b), a, b)


def _arctan2(y, x):
    yv, yd = _parts(y)
    xv, xd = _parts(x)
    r2 = xv * xv + yv * yv
    return _make(
        np.arctan2(yv, xv),
        None if yd is None else (xv / r2)[..., None] * yd,
        None if xd is None else (-yv / r2)[..., None] * xd,
    )


_RULES = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.divide: _div,
    np.power: _power,
    np.maximum: _maximum,
    np.minimum: _minimum,
    np.arctan2: _arctan2,
    np.negative: _unary(np.negative, lambda v, o: -np.ones_like(v)),
    np.positive: _unary(np.positive, lambda v, o: np.ones_like(v)),
    np.sin: _unary(np.sin, lambda v, o: np.cos(v)),
    np.cos: _unary(np.cos, lambda v, o: -np.sin(v)),
    np.tanh: _unary(np.tanh, lambda v, o: 1.0 - o * o),
    np.exp: _unary(np.exp, lambda v, o: o),
    np.log: _unary(np.log, lambda v, o: 1.0 / v),
    np.sqrt: _unary(np.sqrt, lambda v, o: 0.5 / o),
    np.square: _unary(np.square, lambda v, o: 2.0 * v),
    np.absolute: _unary(np.absolute, lambda v, o: np.sign(v)),
    np.arccos: _unary(np.arccos, lambda v, o: -1.0 / np.sqrt(1.0 - v * v)),
}

_PRIMAL_ONLY = {
    np.greater,
    np.greater_equal,
    np.less,
    np.less_equal,
    np.equal,
    np.not_equal,
    np.isfinite,
    np.isnan,
    np.sign,
    np.floor,
}


# ------------------------------------------------------- structural helpers


def _axis_dot(axis, ndim):
    return axis if axis >= 0 else axis - 1


def stack(seq, axis=0):
    seq = list(seq)
    k = _ntan(*seq)
    vals = [value(x) for x in seq]
    out = np.stack(vals, axis=axis)
    if k is None:
        return out
    dots = [tangent(x, k) for x in seq]
    dots = [np.broadcast_to(d, np.shape(v) + (k,)) for d, v in zip(dots, vals)]
    return Jet(out, np.stack(dots, axis=_axis_dot(axis, out.ndim)))


def concatenate(seq, axis=0):
    seq = list(seq)
    k = _ntan(*seq)
    vals = [value(x) for x in seq]
    out = np.concatenate(vals, axis=axis)
    if k is None:
        return out
    dots = [tangent(x, k) for x in seq]
    return Jet(out, np.concatenate(dots, axis=_axis_dot(axis, out.ndim)))


def where(cond, a, b):
    """Elementwise select on a primal boolean mask."""
    return _pick(np.asarray(value(cond), dtype=bool), a, b)


def zeros_like(x):
    return np.zeros(np.shape(value(x)))


def take(x, indices, axis):
    if axis >= 0:
        raise ValueError("take() expects a negative axis")
    if not isinstance(x, Jet):
        return np.take(x, indices, axis=axis)
    return Jet(np.take(x.val, indices, axis=axis), np.take(x.dot, indices, axis=axis - 1))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Jet):
        return np.sum(x, axis=axis, keepdims=keepdims)
    if axis is None:
        axis = tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a if a >= 0 else a + x.ndim for a in axes)
    return Jet(x.val.sum(axis=axes, keepdims=keepdims), x.dot.sum(axis=axes, keepdims=keepdims))


_LETTERS = "ZYXWVUTSRQPONMLKJIHGFEDCBAzyxwvutsrqponmlkjihgfedcba"
_PATHS: dict = {}


def _contract(spec, *arrays):
    """``np.einsum`` with a cached optimized contraction order for 3+ operands."""
    if len(arrays) < 3:
        return np.einsum(spec, *arrays)
    key = (spec,) + tuple(a.shape for a in arrays)
    path = _PATHS.get(key)
    if path is None:
        path = np.einsum_path(spec, *arrays, optimize="greedy")[0]
        _PATHS[key] = path
    return np.einsum(spec, *arrays, optimize=path)


def einsum(subscripts: str, *operands):
    """``np.einsum`` with explicit output, propagating tangents of every jet operand."""
    vals = [value(o) for o in operands]
    out = _contract(subscripts, *vals)
    if not any(isinstance(o, Jet) for o in operands):
        return out
    lhs, rhs = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    t = next(c for c in _LETTERS if c not in subscripts)
    terms = []
    for i, o in enumerate(operands):
        if not isinstance(o, Jet):
            continue
        parts = list(ins)
        parts[i] = parts[i] + t
        spec = ",".join(parts) + "->" + rhs + t
        args = list(vals)
        args[i] = o.dot
        terms.append(_contract(spec, *args))
    return _make(out, *terms)


def solve(a, b):
    """Solve ``a @ x = b`` for vector right-hand sides ``b[..., n]``."""
    av, ad = _parts(a)
    bv, bd = _parts(b)
    x = np.linalg.solve(av, bv[..., None])[..., 0]
    if ad is None and bd is None:
        return x
    rhs = 0.0 if bd is None else bd
    if ad is not None:
        rhs = rhs - np.einsum("...ijk,...j->...ik", ad, x)
    rhs = np.broadcast_to(rhs, x.shape + (rhs.shape[-1],))
    return Jet(x, np.linalg.solve(av, rhs))


def cross(a, b):
    """Cross product over the last axis."""
    av, ad = _parts(a)
    bv, bd = _parts(b)
    out = np.cross(av, bv)
    terms = []
    if ad is not None:
        terms.append(np.cross(ad, bv[..., :, None], axisa=-2, axisb=-2, axisc=-2))
    if bd is not None:
        terms.append(np.cross(av[..., :, None], bd, axisa=-2, axisb=-2, axisc=-2))
    return _make(out, *terms)
