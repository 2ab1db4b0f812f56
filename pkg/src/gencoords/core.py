"""Generalised-coordinate vectors and the shift / Taylor-propagator operators.

A point in generalised coordinates of base dimension ``d`` and order ``N`` is
the stack ``(x^(0), x^(1), ..., x^(N))`` of serial time derivatives, each a
``d``-vector. Coefficients are stored as true derivatives (no factorial
scaling); factorials only enter through :func:`taylor_eval` and
:func:`exp_shift_matrix`.

Flattening is order-major: all ``d`` components of order 0, then order 1, and
so on. In that layout the shift operator is ``kron(S, I_d)`` with ``S`` the
nilpotent upper shift on ``N+1`` orders.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import ShapeError

MAX_ORDER = 64


@dataclass(frozen=True, eq=False)
class GenPoint:
    """Stacked serial derivatives; ``coords[n]`` holds the order-``n`` derivative."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ShapeError(f"coords must have shape (order+1, d), got {np.shape(self.coords)}")
        if c.shape[0] - 1 > MAX_ORDER:
            raise ShapeError(f"order {c.shape[0] - 1} exceeds the cap of {MAX_ORDER}")
        if not np.all(np.isfinite(c)):
            raise ShapeError("coords must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def order(self) -> int:
        return self.coords.shape[0] - 1

    @property
    def base_dim(self) -> int:
        return self.coords.shape[1]

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1).copy()

    @classmethod
    def from_flat(cls, vec, base_dim: int) -> "GenPoint":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.size % base_dim:
            raise ShapeError(f"flat vector of size {vec.size} is not a multiple of d={base_dim}")
        return cls(vec.reshape(-1, base_dim))

    @classmethod
    def zeros(cls, order: int, base_dim: int) -> "GenPoint":
        return cls(np.zeros((order + 1, base_dim)))

    def __len__(self):
        return self.coords.shape[0]

    def __getitem__(self, n):
        return self.coords[n]

    def __eq__(self, other):
        if not isinstance(other, GenPoint):
            return NotImplemented
        return self.coords.shape == other.coords.shape and bool(np.all(self.coords == other.coords))

    def __repr__(self):
        return f"{type(self).__name__}(order={self.order}, d={self.base_dim}, coords={self.coords.tolist()})"


class GenNoise(GenPoint):
    """Serial derivatives ``(w^(0), ..., w^(N-1))`` of the noise at one instant.

    Structurally identical to :class:`GenPoint`; its ``order`` is ``N - 1``
    when it drives a state of order ``N``.
    """


def _check_order(N: int):
    if N < 0 or N > MAX_ORDER:
        raise ShapeError(f"order must lie in [0, {MAX_ORDER}], got {N}")


def shift(x: GenPoint) -> GenPoint:
    """Apply ``D``: ``(x0, ..., xN) -> (x1, ..., xN, 0)``."""
    out = np.zeros_like(x.coords)
    out[:-1] = x.coords[1:]
    return GenPoint(out)


def shift_drop(x: GenPoint) -> GenNoise:
    """Apply ``D'``: ``(x0, ..., xN) -> (x1, ..., xN)``."""
    if x.order < 1:
        raise ShapeError("D' needs a point of order at least 1")
    return GenNoise(x.coords[1:])


def shift_matrix(N: int, d: int) -> np.ndarray:
    """Flattened ``D`` of shape ((N+1)d, (N+1)d)."""
    _check_order(N)
    return np.kron(np.eye(N + 1, k=1), np.eye(d))


def shift_drop_matrix(N: int, d: int) -> np.ndarray:
    """Flattened ``D'`` of shape (Nd, (N+1)d)."""
    _check_order(N)
    if N < 1:
        raise ShapeError("D' needs N >= 1")
    return np.kron(np.eye(N, N + 1, k=1), np.eye(d))


def _taylor_weights(N: int, t: float) -> np.ndarray:
    # w[k] = t^k / k!
    w = np.empty(N + 1)
    w[0] = 1.0
    for k in range(1, N + 1):
        w[k] = w[k - 1] * t / k
    return w


def taylor_eval(x: GenPoint, t: float) -> GenPoint:
    """Propagate ``x`` by ``exp(tD)``.

    ``result[n] = sum_{i=0}^{N-n} x[i+n] t^i / i!``, so ``result[0]`` is the
    Taylor polynomial of the trajectory evaluated at ``t``.
    """
    N = x.order
    w = _taylor_weights(N, float(t))
    c = x.coords
    out = np.empty_like(c)
    for n in range(N + 1):
        out[n] = w[: N + 1 - n] @ c[n:]
    return GenPoint(out)


def taylor_polynomial(coords, times) -> np.ndarray:
    """Order-0 Taylor polynomial of stacked ``coords`` (N+1, d) at each time.

    Returns an array of shape (len(times), d).
    """
    coords = np.asarray(coords, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    N = coords.shape[0] - 1
    powers = np.ones((times.size, N + 1))
    for k in range(1, N + 1):
        powers[:, k] = powers[:, k - 1] * times / k
    return powers @ coords


def exp_shift_matrix(N: int, t: float, d: int = 1) -> np.ndarray:
    """Explicit ((N+1)d, (N+1)d) matrix of ``exp(tD)`` in order-major layout."""
    _check_order(N)
    if d < 1:
        raise ShapeError("d must be positive")
    w = _taylor_weights(N, float(t))
    S = np.zeros((N + 1, N + 1))
    for k in range(N + 1):
        S += np.eye(N + 1, k=k) * w[k]
    return np.kron(S, np.eye(d))


def factorials(N: int) -> np.ndarray:
    return np.array([float(factorial(k)) for k in range(N + 1)])
