"""Stationary autocovariance kernels and the generalised noise covariance.

The generalised fluctuations ``(w, w', ..., w^(N-1))`` of a stationary process
with autocovariance ``kappa`` have cross-covariance blocks
``E[w^(n)_t w^(m)_{t+h}] = (-1)^n kappa^(n+m)(h) I_d``. At ``h = 0`` odd
derivatives vanish and the matrix is a checkerboard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import factorial, pi, sqrt

import numpy as np
from numpy.polynomial import hermite

from ._linalg import jittered_cholesky
from .core import GenNoise
from .errors import (
    DegenerateCovariance,
    InsufficientKernelOrder,
    InvalidCovariance,
    InvalidKernel,
    ShapeError,
    ZeroVarianceSeries,
)

FAMILIES = ("gaussian", "square_rational", "custom_series")


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


@dataclass(frozen=True)
class KernelSpec:
    """A scalar stationary autocovariance applied as ``kappa(h) * I_d``.

    family : ``"gaussian"`` (white noise convolved with a Gaussian of width
        ``sigma``, ``kappa(h) = exp(-h^2 / 4 sigma^2) / (2 sqrt(pi) sigma)``),
        ``"square_rational"`` (``kappa(h) = 1 / (1 + h^2)``) or
        ``"custom_series"`` (``kappa(h) = sum_k coefficients[k] h^k``).
    scale : variance multiplier applied on top of the family's closed form.
    radius : validity radius for evaluating a custom series away from 0.
    """

    family: str = "gaussian"
    sigma: float = 1.0
    coefficients: tuple = ()
    base_dim: int = 1
    scale: float = 1.0
    radius: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidKernel(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.base_dim < 1:
            raise InvalidKernel("base_dim must be positive")
        if not (self.scale >= 0 and np.isfinite(self.scale)):
            raise InvalidKernel("scale must be a finite non-negative number")
        if self.family == "gaussian" and not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise InvalidKernel("gaussian kernel needs sigma > 0")
        if self.family == "custom_series":
            coeffs = tuple(float(c) for c in self.coefficients)
            if not coeffs:
                raise InvalidKernel("custom_series needs at least one coefficient")
            if any(c != 0.0 for c in coeffs[1::2]):
                raise InvalidKernel("custom_series must be even: odd Taylor coefficients must be zero")
            object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def gaussian(cls, sigma: float, base_dim: int = 1, scale: float = 1.0) -> "KernelSpec":
        return cls("gaussian", sigma=sigma, base_dim=base_dim, scale=scale)

    @classmethod
    def square_rational(cls, base_dim: int = 1, scale: float = 1.0) -> "KernelSpec":
        return cls("square_rational", base_dim=base_dim, scale=scale)

    @classmethod
    def custom_series(cls, coefficients, base_dim: int = 1, radius: float = 0.5) -> "KernelSpec":
        return cls("custom_series", coefficients=tuple(coefficients), base_dim=base_dim, radius=radius)

    def with_base_dim(self, d: int) -> "KernelSpec":
        return KernelSpec(self.family, self.sigma, self.coefficients, d, self.scale, self.radius)

    @property
    def max_derivative(self) -> int | None:
        """Highest derivative available, or ``None`` when unbounded."""
        if self.family == "custom_series":
            return len(self.coefficients) - 1
        return None

    def deriv_at_zero(self, j: int) -> float:
        if j < 0:
            raise ValueError("derivative order must be non-negative")
        top = self.max_derivative
        if top is not None and j > top:
            raise InsufficientKernelOrder(
                f"kernel series has {top + 1} coefficients; derivative {j} unavailable"
            )
        if j % 2:
            return 0.0
        n = j // 2
        if self.family == "gaussian":
            s = self.sigma
            val = (-1) ** n * _double_factorial(2 * n - 1) / (2 ** (n + 1) * sqrt(pi) * s ** (2 * n + 1))
        elif self.family == "square_rational":
            val = (-1) ** n * float(factorial(2 * n))
        else:
            val = self.coefficients[j] * float(factorial(j))
        return self.scale * val

    def deriv(self, j: int, h: float) -> float:
        """``kappa^(j)(h)``."""
        h = float(h)
        if h == 0.0:
            return self.deriv_at_zero(j)
        if j < 0:
            raise ValueError("derivative order must be non-negative")
        if self.family == "gaussian":
            s = self.sigma
            x = h / (2 * s)
            coef = np.zeros(j + 1)
            coef[j] = 1.0
            hj = hermite.hermval(x, coef)
            base = np.exp(-x * x) / (2 * sqrt(pi) * s)
            return float(self.scale * (-1) ** j * (2 * s) ** (-j) * hj * base)
        if self.family == "square_rational":
            # 1/(1+h^2) = Im 1/(h - i)
            val = (-1) ** j * factorial(j) * (complex(h, -1.0) ** (-(j + 1))).imag
            return float(self.scale * val)
        top = self.max_derivative
        if j > top:
            raise InsufficientKernelOrder(
                f"kernel series has {top + 1} coefficients; derivative {j} unavailable"
            )
        if abs(h) >= self.radius:
            raise InvalidKernel(f"|h|={abs(h)} outside the series validity radius {self.radius}")
        a = self.coefficients
        val = sum(a[k] * factorial(k) / factorial(k - j) * h ** (k - j) for k in range(j, len(a)))
        return float(self.scale * val)

    def __call__(self, h: float) -> float:
        return self.deriv(0, h)


def kernel_deriv_at_zero(k: KernelSpec, j: int) -> float:
    return k.deriv_at_zero(j)


@dataclass(frozen=True, eq=False)
class GenCov:
    """Covariance of generalised fluctuations.

    ``order`` counts derivative blocks (orders 0..order-1), so ``matrix`` has
    shape (order*d, order*d) in order-major layout.
    """

    order: int
    base_dim: int
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        n = self.order * self.base_dim
        if m.shape != (n, n):
            raise ShapeError(f"matrix shape {m.shape} does not match order={self.order}, d={self.base_dim}")
        if not np.all(np.isfinite(m)):
            raise InvalidCovariance("covariance has non-finite entries")
        big = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * big:
            raise InvalidCovariance("covariance is not symmetric")
        d = self.base_dim
        for a in range(self.order):
            for b in range(self.order):
                if (a + b) % 2 and np.any(m[a * d:(a + 1) * d, b * d:(b + 1) * d] != 0.0):
                    raise InvalidCovariance(f"checkerboard violated at block ({a}, {b})")
        if n:
            ev = np.linalg.eigvalsh(m)
            if ev[0] < -1e-9 * max(ev[-1], 0.0) and ev[0] < -1e-300:
                raise InvalidCovariance(f"covariance is not positive semi-definite (min eigenvalue {ev[0]:.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @cached_property
    def cholesky(self):
        """``(L, eps)`` from :func:`jittered_cholesky`; ``L`` is ``None`` on failure."""
        return jittered_cholesky(self.matrix)

    def block(self, n: int, m: int) -> np.ndarray:
        d = self.base_dim
        return self.matrix[n * d:(n + 1) * d, m * d:(m + 1) * d]


def _scalar_blocks(k: KernelSpec, N: int, h: float = 0.0) -> np.ndarray:
    S = np.empty((N, N))
    for n in range(N):
        for m in range(N):
            S[n, m] = (-1) ** n * k.deriv(n + m, h)
    return S


def build_gen_cov(k: KernelSpec, N: int, d: int | None = None) -> GenCov:
    """Generalised covariance with blocks ``(-1)^n kappa^(n+m)(0) I_d``, n, m < N."""
    d = k.base_dim if d is None else d
    if N < 1:
        raise ShapeError("need at least one derivative block")
    top = k.max_derivative
    if top is not None and 2 * (N - 1) > top:
        raise InsufficientKernelOrder(f"order {N} needs kernel derivatives up to {2 * (N - 1)}")
    S = _scalar_blocks(k, N)
    ev = np.linalg.eigvalsh(S)
    if ev[0] < -1e-9 * max(ev[-1], 0.0) and ev[0] < -1e-300:
        raise InvalidKernel(f"kernel yields a non-PSD generalised covariance (min eigenvalue {ev[0]:.3e})")
    return GenCov(N, d, np.kron(S, np.eye(d)))


def build_cross_cov(k: KernelSpec, N: int, d: int | None, h: float) -> np.ndarray:
    """``E[w_t w_{t+h}^T]`` in generalised coordinates: blocks ``(-1)^n kappa^(n+m)(h) I_d``."""
    d = k.base_dim if d is None else d
    top = k.max_derivative
    if top is not None and 2 * (N - 1) > top:
        raise InsufficientKernelOrder(f"order {N} needs kernel derivatives up to {2 * (N - 1)}")
    return np.kron(_scalar_blocks(k, N, h), np.eye(d))


def noise_factor(cov: GenCov) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T`` equal to ``cov.matrix`` (up to jitter)."""
    if not np.any(cov.matrix):
        return np.zeros_like(cov.matrix)
    L, _ = cov.cholesky
    if L is None:
        raise DegenerateCovariance("Cholesky failed after maximum jitter")
    return L


def sample_gen_noise(cov: GenCov, rng_seed: int, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. generalised fluctuations from N(0, cov).

    Returns an array of shape (count, cov.order, cov.base_dim); each slice is
    the coordinate stack of one :class:`~gencoords.core.GenNoise`.
    """
    L = noise_factor(cov)
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((count, L.shape[0]))
    return (z @ L.T).reshape(count, cov.order, cov.base_dim)


def sample_gen_noise_per_seed(cov: GenCov, seeds) -> np.ndarray:
    """One draw per seed; row ``i`` equals ``sample_gen_noise(cov, seeds[i], 1)[0]``."""
    L = noise_factor(cov)
    z = np.stack([np.random.default_rng(int(s)).standard_normal(L.shape[0]) for s in seeds])
    return (z @ L.T).reshape(len(z), cov.order, cov.base_dim)


def as_gen_noise(sample: np.ndarray) -> GenNoise:
    return GenNoise(sample)


def empirical_autocovariance(samples, max_lag: int | None = None) -> np.ndarray:
    """Biased (1/n) autocovariance of a univariate series for lags 0..max_lag."""
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    x = x - x.mean()
    if max_lag is None:
        max_lag = n - 1
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    return acov


def first_zero_crossing(samples, dt: float, max_lag: int | None = None) -> float:
    """Smallest positive lag (time units) at which the empirical autocovariance hits zero.

    The crossing is linearly interpolated between the bracketing lags. When
    the autocovariance stays positive up to ``max_lag`` (default ``n // 2``)
    that maximum lag is returned.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 8:
        raise ShapeError("need at least 8 samples")
    if np.ptp(x) == 0.0:
        raise ZeroVarianceSeries("series is constant")
    if max_lag is None:
        max_lag = x.size // 2
    max_lag = min(int(max_lag), x.size - 1)
    acov = empirical_autocovariance(x, max_lag)
    nonpos = np.nonzero(acov[1:] <= 0.0)[0]
    if nonpos.size == 0:
        return max_lag * dt
    k = int(nonpos[0]) + 1
    a, b = acov[k - 1], acov[k]
    frac = a / (a - b) if a != b else 0.0
    return (k - 1 + frac) * dt
