"""Closed-form statistics of linear SDEs ``dx = A x dt + w dt`` in generalised
coordinates, their convergence radius, and the Gaussian pushforward under
the free generalised flow ``exp(t D)``."""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .core import GenPoint, exp_shift_matrix, taylor_eval
from .errors import InvalidCovariance, ShapeError
from .noise import KernelSpec


@dataclass(frozen=True, eq=False)
class LinearModel:
    A: np.ndarray
    z: np.ndarray
    kernel: KernelSpec

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if A.shape != (z.size, z.size):
            raise ShapeError(f"A has shape {A.shape} but z has length {z.size}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(z))):
            raise ShapeError("A and z must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "z", z)

    @property
    def dim(self) -> int:
        return self.z.size


def matrix_powers(A: np.ndarray, n: int) -> list:
    """``[I, A, ..., A^n]`` by repeated multiplication."""
    out = [np.eye(A.shape[0])]
    for _ in range(n):
        out.append(out[-1] @ A)
    return out


def linear_mean(lm: LinearModel, N: int, t: float) -> np.ndarray:
    """``sum_{n=0}^N A^n z t^n / n!``."""
    powers = matrix_powers(lm.A, N)
    return sum(powers[n] @ lm.z * (t ** n / factorial(n)) for n in range(N + 1))


def linear_cov(lm: LinearModel, N: int, t: float, s: float) -> np.ndarray:
    """Truncated autocovariance of the order-``N`` Taylor approximation.

    ``sum_{n,m=1}^N t^n s^m / (n! m!) sum_{k<n, l<m} A^(n-1-k) (-1)^k kappa^(k+l)(0) (A^(m-1-l))^T``
    """
    d = lm.dim
    if N < 1:
        return np.zeros((d, d))
    powers = matrix_powers(lm.A, N - 1)
    kappa = np.array([lm.kernel.deriv_at_zero(j) for j in range(2 * N - 1)])
    # inner[n-1] = sum_k A^(n-1-k) (-1)^k kappa^(k+l)(0), kept per l
    out = np.zeros((d, d))
    for n in range(1, N + 1):
        cn = t ** n / factorial(n)
        if cn == 0.0:
            continue
        for m in range(1, N + 1):
            cm = s ** m / factorial(m)
            if cm == 0.0:
                continue
            block = np.zeros((d, d))
            for k in range(n):
                left = powers[n - 1 - k] * (-1) ** k
                for l in range(m):
                    block += kappa[k + l] * left @ powers[m - 1 - l].T
            out += cn * cm * block
    return out


def inf_norm(A) -> float:
    """``max_i sum_j |A_ij|``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return float(np.max(np.sum(np.abs(A), axis=1)))


def convergence_radius(A, R: float) -> float:
    """``R / max(1, ||A||_inf, ||A^T||_inf)``."""
    if not R > 0:
        raise ValueError("R must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lam = max(1.0, inf_norm(A), inf_norm(A.T))
    return R / lam


def gaussian_pushforward(mu0: GenPoint, Xi0, t: float):
    """Push ``N(mu0, Xi0)`` through ``exp(t D)``; returns ``(mean, cov)``."""
    N, d = mu0.order, mu0.base_dim
    n = (N + 1) * d
    Xi0 = np.asarray(Xi0, dtype=float)
    if Xi0.shape != (n, n):
        raise ShapeError(f"covariance must be {n}x{n}")
    if not np.all(np.isfinite(Xi0)):
        raise InvalidCovariance("covariance has non-finite entries")
    big = max(1.0, float(np.max(np.abs(Xi0))))
    if np.max(np.abs(Xi0 - Xi0.T)) > 1e-12 * big:
        raise InvalidCovariance("covariance is not symmetric")
    ev = np.linalg.eigvalsh(Xi0)
    if ev[0] < -1e-9 * max(ev[-1], 1e-300):
        raise InvalidCovariance(f"covariance is not positive semi-definite (min eigenvalue {ev[0]:.3e})")
    M = exp_shift_matrix(N, t, d)
    cov = M @ Xi0 @ M.T
    return taylor_eval(mu0, t), 0.5 * (cov + cov.T)
