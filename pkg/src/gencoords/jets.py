"""Truncated Taylor-series arithmetic in time.

A :class:`Jet` of order ``K`` carries the first ``K+1`` time derivatives of a
scalar function of ``t`` at ``t = 0``. Internally the Taylor coefficients
``c[k] = f^(k)(0) / k!`` are stored so that products are Cauchy convolutions.
Trailing array axes are batch axes and broadcast elementwise.

:class:`TangentJet` adds first-order sensitivities with respect to ``P``
input parameters, which gives exact Jacobians of whole jets in one pass.
"""

from __future__ import annotations

from math import factorial

import numpy as np


def _cauchy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    K = a.shape[0] - 1
    shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    out = np.empty((K + 1,) + shape)
    for k in range(K + 1):
        out[k] = np.sum(a[: k + 1] * b[k::-1], axis=0)
    return out


def _inv_factorials(K: int) -> np.ndarray:
    return np.array([1.0 / factorial(k) for k in range(K + 1)])


class Jet:
    __slots__ = ("c",)
    __array_ufunc__ = None

    def __init__(self, taylor_coeffs):
        self.c = np.asarray(taylor_coeffs, dtype=float)

    @classmethod
    def from_derivatives(cls, derivs) -> "Jet":
        d = np.asarray(derivs, dtype=float)
        scale = _inv_factorials(d.shape[0] - 1).reshape((-1,) + (1,) * (d.ndim - 1))
        return cls(d * scale)

    @classmethod
    def constant(cls, value, K: int) -> "Jet":
        v = np.asarray(value, dtype=float)
        c = np.zeros((K + 1,) + v.shape)
        c[0] = v
        return cls(c)

    @property
    def order(self) -> int:
        return self.c.shape[0] - 1

    def derivatives(self) -> np.ndarray:
        K = self.order
        scale = np.array([float(factorial(k)) for k in range(K + 1)])
        return self.c * scale.reshape((-1,) + (1,) * (self.c.ndim - 1))

    def __add__(self, other):
        if isinstance(other, TangentJet):
            return NotImplemented
        if isinstance(other, Jet):
            return Jet(self.c + other.c)
        c = self.c.copy()
        c[0] = c[0] + other
        return Jet(c)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.c)

    def __sub__(self, other):
        if isinstance(other, TangentJet):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TangentJet):
            return NotImplemented
        if isinstance(other, Jet):
            return Jet(_cauchy(self.c, other.c))
        return Jet(self.c * other)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        return _int_power(self, k, lambda: Jet.constant(np.ones(self.c.shape[1:]), self.order))


class TangentJet:
    """A jet together with its derivative with respect to ``P`` parameters.

    ``val.c`` has shape (K+1, *batch); ``tan`` has shape (K+1, *batch, P).
    """

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val: Jet, tan: np.ndarray):
        self.val = val
        self.tan = np.asarray(tan, dtype=float)

    @property
    def order(self) -> int:
        return self.val.order

    def __add__(self, other):
        if isinstance(other, TangentJet):
            return TangentJet(self.val + other.val, self.tan + other.tan)
        return TangentJet(self.val + other, self.tan)

    __radd__ = __add__

    def __neg__(self):
        return TangentJet(-self.val, -self.tan)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TangentJet):
            val = self.val * other.val
            tan = _cauchy(self.val.c[..., None], other.tan) + _cauchy(self.tan, other.val.c[..., None])
            return TangentJet(val, tan)
        if isinstance(other, Jet):
            return TangentJet(self.val * other, _cauchy(self.tan, other.c[..., None]))
        return TangentJet(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        one = Jet.constant(np.ones(self.val.c.shape[1:]), self.order)
        return _int_power(self, k, lambda: TangentJet(one, np.zeros_like(self.tan)))


def _int_power(base, k, one):
    if int(k) != k or k < 0:
        raise ValueError("only non-negative integer powers are supported")
    k = int(k)
    result = None
    sq = base
    while k:
        if k & 1:
            result = sq if result is None else result * sq
        k >>= 1
        if k:
            sq = sq * sq
    return one() if result is None else result
