"""Generalised Bayesian filtering.

The posterior over the generalised state is a Gaussian ``N(mu, Sigma)``.
The mean descends the Laplace free energy along the free generalised flow,
``mu' = D mu - lam * grad F_L(mu)``, and the covariance is the inverse energy
Hessian. In ``"linear"`` mode the flows are expanded to first order about a
frozen point (the current mean by default), so the energy is quadratic in
``mu`` around that point and third derivatives vanish.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from ._linalg import inverse_from_cholesky, jittered_cholesky, symmetrize
from .core import GenPoint, shift_drop_matrix
from .errors import (
    EmbeddingError,
    FilterError,
    NotEnoughSamples,
    OutsideLaplaceDomain,
    ShapeError,
    SingularCovariance,
    SingularHessian,
    StepSizeError,
)
from .flow import (
    ModelSpec,
    _check_mode,
    gen_flow,
    gen_flow_affine,
    gen_jacobian,
    gen_likelihood,
    gen_likelihood_affine,
    gen_likelihood_jacobian,
)
from .noise import GenCov

FD_STEP = 1e-5
BLOWUP_BOUND = 1e8


def _precision(cov: GenCov, what: str) -> np.ndarray:
    L, _ = cov.cholesky
    if L is None:
        raise SingularCovariance(f"{what} covariance is singular after jitter")
    return inverse_from_cholesky(L)


@dataclass(frozen=True, eq=False)
class GenerativeModel:
    """Flow and observation model with generalised noise covariances.

    ``cov_w`` has ``N`` blocks (fluctuations of orders 0..N-1) and ``cov_z``
    has ``M + 1`` blocks (observation noise of orders 0..M).
    """

    model: ModelSpec
    N: int
    M: int
    cov_w: GenCov
    cov_z: GenCov
    lam: float = 1.0
    mode: str = "linear"
    prec_w: np.ndarray = field(init=False, repr=False)
    prec_z: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _check_mode(self.mode)
        if self.model.obs_map is None:
            from .errors import NoObservationModel

            raise NoObservationModel("generative model needs an observation map")
        if not (1 <= self.N and 0 <= self.M <= self.N):
            raise ShapeError(f"need 1 <= N and 0 <= M <= N, got N={self.N}, M={self.M}")
        if self.cov_w.order != self.N or self.cov_w.base_dim != self.model.state_dim:
            raise ShapeError("cov_w must have N blocks of the state dimension")
        if self.cov_z.order != self.M + 1 or self.cov_z.base_dim != self.model.obs_dim:
            raise ShapeError("cov_z must have M+1 blocks of the observation dimension")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        object.__setattr__(self, "prec_w", _precision(self.cov_w, "state noise"))
        object.__setattr__(self, "prec_z", _precision(self.cov_z, "observation noise"))

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def size(self) -> int:
        """Length of the flattened generalised state, ``(N + 1) d``."""
        return (self.N + 1) * self.model.state_dim

    def with_order(self, N: int, M: int, cov_w: GenCov, cov_z: GenCov) -> "GenerativeModel":
        return GenerativeModel(self.model, N, M, cov_w, cov_z, self.lam, self.mode)


@dataclass(frozen=True, eq=False)
class GenObservation:
    time: float
    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or not np.all(np.isfinite(c)):
            raise ShapeError("observation coordinates must be a finite (M+1, m) array")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "time", float(self.time))

    @property
    def order(self) -> int:
        return self.coords.shape[0] - 1


@dataclass(frozen=True, eq=False)
class FilterState:
    time: float
    mu: GenPoint
    sigma: np.ndarray
    free_energy: float


# ---------------------------------------------------------------------------
# embedding sampled data


def _check_history(series, M: int, index: int):
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if M < 0:
        raise ShapeError("M must be non-negative")
    if index < M or index >= y.shape[0]:
        raise NotEnoughSamples(f"index {index} needs {M} earlier samples within a series of length {y.shape[0]}")
    return y


def embed_finite_diff(series, dt: float, M: int, index: int, time: float | None = None) -> GenObservation:
    """Iterated backward differences of ``series`` at ``index``, divided by ``dt^k``."""
    y = _check_history(series, M, index)
    window = y[index - M: index + 1][::-1]  # newest first
    coords = np.empty((M + 1, y.shape[1]))
    diff = window
    for k in range(M + 1):
        coords[k] = diff[0] / dt ** k
        diff = diff[:-1] - diff[1:]
    return GenObservation(index * dt if time is None else time, coords)


def inverse_taylor_matrix(M: int) -> np.ndarray:
    """``V[i, n] = (-i)^n / n!``, the Taylor map in units of the sampling step."""
    i = np.arange(M + 1, dtype=float)
    return np.stack([(-i) ** n / factorial(n) for n in range(M + 1)], axis=1)


def embed_inverse_taylor(series, dt: float, M: int, index: int, time: float | None = None) -> GenObservation:
    """Derivatives whose Taylor polynomial interpolates the ``M + 1`` latest samples.

    Solves ``y_{t - i dt} = sum_n y^(n) (-i dt)^n / n!`` for i = 0..M. The
    system is solved in units of ``dt`` and rescaled, which keeps it well
    conditioned for small steps.
    """
    if not dt > 0:
        raise StepSizeError("dt must be positive")
    y = _check_history(series, M, index)
    window = y[index - M: index + 1][::-1]
    V = inverse_taylor_matrix(M)
    try:
        scaled = np.linalg.solve(V, window)
    except np.linalg.LinAlgError as exc:  # distinct nodes make this unreachable
        raise EmbeddingError("interpolation matrix is singular") from exc
    coords = scaled / (dt ** np.arange(M + 1))[:, None]
    return GenObservation(index * dt if time is None else time, coords)


# ---------------------------------------------------------------------------
# energy and its derivatives


def _as_point(gm: GenerativeModel, mu) -> GenPoint:
    mu = mu if isinstance(mu, GenPoint) else GenPoint(mu)
    if mu.order != gm.N or mu.base_dim != gm.state_dim:
        raise ShapeError(f"mean must have order {gm.N} and dimension {gm.state_dim}")
    return mu


def _obs_coords(gm: GenerativeModel, y) -> np.ndarray:
    c = y.coords if isinstance(y, GenObservation) else np.asarray(y, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] < gm.M + 1 or c.shape[1] != gm.model.obs_dim:
        raise ShapeError(f"observation must have at least {gm.M + 1} orders of dimension {gm.model.obs_dim}")
    return c[: gm.M + 1]


def prediction_errors(gm: GenerativeModel, y, mu, at: GenPoint | None = None):
    """Flattened ``(y - g(mu), D'mu - f(mu))``.

    In linear mode the flows are expanded about ``at`` (default ``mu``).
    """
    mu = _as_point(gm, mu)
    yc = _obs_coords(gm, y)
    if gm.mode == "linear":
        at = mu if at is None else at
        gx = gen_likelihood_affine(gm.model, mu, gm.M, at)
        fx = gen_flow_affine(gm.model, mu, at)
    else:
        gx = gen_likelihood(gm.model, mu, gm.M, "exact")
        fx = gen_flow(gm.model, mu, "exact")
    return (yc - gx).ravel(), (mu.coords[1:] - fx).ravel()


def energy(gm: GenerativeModel, y, mu, at: GenPoint | None = None) -> float:
    """``V = e_y^T Pz e_y / 2 + e_x^T Pw e_x / 2``."""
    ey, ex = prediction_errors(gm, y, mu, at)
    return float(0.5 * ey @ gm.prec_z @ ey + 0.5 * ex @ gm.prec_w @ ex)


def _jacobians(gm: GenerativeModel, mu: GenPoint):
    Jg = gen_likelihood_jacobian(gm.model, mu, gm.M, gm.mode)
    Jx = shift_drop_matrix(gm.N, gm.state_dim) - gen_jacobian(gm.model, mu, gm.mode)
    return Jg, Jx


def energy_grad(gm: GenerativeModel, y, mu) -> GenPoint:
    """``-grad g^T Pz e_y + (D' - grad f)^T Pw e_x``."""
    mu = _as_point(gm, mu)
    if gm.mode == "linear":
        return GenPoint(_linear_grad(gm, _obs_coords(gm, y), mu.coords))
    ey, ex = prediction_errors(gm, y, mu)
    Jg, Jx = _jacobians(gm, mu)
    g = -Jg.T @ (gm.prec_z @ ey) + Jx.T @ (gm.prec_w @ ex)
    return GenPoint.from_flat(g, gm.state_dim)


def _linear_grad(gm: GenerativeModel, yc: np.ndarray, c: np.ndarray) -> np.ndarray:
    # block-structured products; the Jacobians are block diagonal in linear mode
    N, M = gm.N, gm.M
    f0, J = gm.model.f_and_jacobian(c[0])
    g0, G = gm.model.g_and_jacobian(c[0])
    fx = np.empty((N, c.shape[1]))
    fx[0] = f0
    fx[1:] = c[1:N] @ J.T
    gx = np.empty((M + 1, yc.shape[1]))
    gx[0] = g0
    gx[1:] = c[1:M + 1] @ G.T
    sz = (gm.prec_z @ (yc - gx).ravel()).reshape(M + 1, -1)
    sx = (gm.prec_w @ (c[1:] - fx).ravel()).reshape(N, -1)
    out = np.zeros_like(c)
    out[: M + 1] -= sz @ G
    out[1:] += sx
    out[:N] -= sx @ J
    return out


def energy_hessian(gm: GenerativeModel, y, mu) -> np.ndarray:
    """Energy Hessian: Gauss-Newton form in linear mode, central differences of the gradient otherwise."""
    mu = _as_point(gm, mu)
    if gm.mode == "linear":
        Jg, Jx = _jacobians(gm, mu)
        return symmetrize(Jg.T @ gm.prec_z @ Jg + Jx.T @ gm.prec_w @ Jx)
    v = mu.flat()
    d = gm.state_dim
    H = np.empty((v.size, v.size))
    for i in range(v.size):
        h = FD_STEP * (1.0 + abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        gp = energy_grad(gm, y, GenPoint.from_flat(vp, d)).flat()
        gm_ = energy_grad(gm, y, GenPoint.from_flat(vm, d)).flat()
        H[:, i] = (gp - gm_) / (2 * h)
    return symmetrize(H)


def optimal_cov(H, return_jitter: bool = False):
    """``Sigma* = H^-1`` through a jittered Cholesky factorisation.

    Jitter is a documented degradation: a :class:`RuntimeWarning` is issued
    and, with ``return_jitter``, the relative jitter used is returned too.
    """
    H = np.asarray(H, dtype=float)
    L, eps = jittered_cholesky(symmetrize(H))
    if L is None:
        raise SingularHessian("energy Hessian is singular or indefinite after maximum jitter")
    if eps:
        warnings.warn(f"energy Hessian needed relative jitter {eps:g}", RuntimeWarning, stacklevel=2)
    cov = inverse_from_cholesky(L)
    return (cov, eps) if return_jitter else cov


def _logdet(H: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(H)
    if sign <= 0 or not np.isfinite(val):
        raise OutsideLaplaceDomain("energy Hessian has non-positive determinant")
    return float(val)


def laplace_free_energy(gm: GenerativeModel, y, mu) -> float:
    """``F_L = V + log det H / 2 - ((N+1) d / 2) log(2 pi e)``."""
    H = energy_hessian(gm, y, mu)
    return energy(gm, y, mu) + 0.5 * _logdet(H) - 0.5 * gm.size * np.log(2 * np.pi * np.e)


def logdet_grad(gm: GenerativeModel, y, mu) -> GenPoint:
    """``d/dmu_i log det H = Tr(H^-1 dH/dmu_i)``; identically zero in linear mode."""
    mu = _as_point(gm, mu)
    d = gm.state_dim
    if gm.mode == "linear":
        return GenPoint.zeros(gm.N, d)
    v = mu.flat()
    Hinv = optimal_cov(energy_hessian(gm, y, mu))
    out = np.empty(v.size)
    step = 1e3 * FD_STEP
    for i in range(v.size):
        h = step * (1.0 + abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        dH = (energy_hessian(gm, y, GenPoint.from_flat(vp, d)) - energy_hessian(gm, y, GenPoint.from_flat(vm, d))) / (2 * h)
        out[i] = np.sum(Hinv * dH.T)
    return GenPoint.from_flat(out, d)


def free_energy_grad(gm: GenerativeModel, y, mu) -> GenPoint:
    """``grad V + grad log det H / 2``; exactly ``grad V`` in linear mode."""
    gv = energy_grad(gm, y, mu)
    if gm.mode == "linear":
        return gv
    return GenPoint(gv.coords + 0.5 * logdet_grad(gm, y, mu).coords)


# ---------------------------------------------------------------------------
# the filter


def default_mu0(gm: GenerativeModel, y0) -> GenPoint:
    """Observation pseudo-inverse at order 0 (about the origin), zeros above."""
    yc = _obs_coords(gm, y0)
    d = gm.state_dim
    zero = np.zeros(d)
    G = gm.model.jacobian_g(zero)
    coords = np.zeros((gm.N + 1, d))
    coords[0] = np.linalg.pinv(G) @ (yc[0] - gm.model.g(zero))
    return GenPoint(coords)


def _drift(gm: GenerativeModel, y, v: np.ndarray) -> np.ndarray:
    d = gm.state_dim
    c = v.reshape(-1, d)
    shifted = np.zeros_like(c)
    shifted[:-1] = c[1:]
    if gm.mode == "linear":
        grad = _linear_grad(gm, _obs_coords(gm, y), c)
    else:
        grad = free_energy_grad(gm, y, GenPoint(c)).coords
    return (shifted - gm.lam * grad).ravel()


def _state(gm: GenerativeModel, y: GenObservation, v: np.ndarray) -> FilterState:
    mu = GenPoint.from_flat(v, gm.state_dim)
    H = energy_hessian(gm, y, mu)
    sigma = optimal_cov(H)
    F = energy(gm, y, mu) + 0.5 * _logdet(H) - 0.5 * gm.size * np.log(2 * np.pi * np.e)
    return FilterState(y.time, mu, sigma, F)


def run_filter(
    gm: GenerativeModel,
    observations,
    mu0: GenPoint | None = None,
    dt_integrate: float = 1e-3,
    bound: float = BLOWUP_BOUND,
    richardson_tol: float = 1e-2,
) -> list:
    """Euler-integrate the mean between observation times; one :class:`FilterState` per observation.

    Over ``(t_{i-1}, t_i]`` the observation ``y_{i-1}`` is held fixed. At each
    observation time the covariance is set to the inverse energy Hessian and
    the Laplace free energy is recorded. A blow-up truncates the run with a
    :class:`RuntimeWarning`.
    """
    obs = list(observations)
    if not obs:
        return []
    times = np.array([o.time for o in obs])
    if np.any(np.diff(times) <= 0):
        raise FilterError("observations must be strictly time-sorted")
    if not dt_integrate > 0:
        raise StepSizeError("dt_integrate must be positive")
    n_sub = np.rint(np.diff(times) / dt_integrate).astype(int)
    if np.any(np.abs(n_sub * dt_integrate - np.diff(times)) > 1e-9 * np.maximum(1.0, np.diff(times))) or np.any(n_sub < 1):
        raise StepSizeError("dt_integrate must divide the observation spacing")
    mu = default_mu0(gm, obs[0]) if mu0 is None else _as_point(gm, mu0)
    v = mu.flat()
    states = [_state(gm, obs[0], v)]
    if len(obs) > 1:
        _richardson_check(gm, obs[0], v, dt_integrate, richardson_tol)
    with np.errstate(all="ignore"):
        for i in range(1, len(obs)):
            y = obs[i - 1]
            try:
                for _ in range(n_sub[i - 1]):
                    v = v + dt_integrate * _drift(gm, y, v)
                    if not (np.all(np.isfinite(v)) and np.max(np.abs(v)) <= bound):
                        raise FloatingPointError
                states.append(_state(gm, obs[i], v))
            except (FloatingPointError, ShapeError, SingularHessian, OutsideLaplaceDomain) as exc:
                warnings.warn(f"filter diverged between t={times[i - 1]:g} and t={times[i]:g}: {exc!r}", RuntimeWarning, stacklevel=2)
                break
    return states


def _richardson_check(gm, y, v, dt, tol):
    """Warn when one Euler step and two half steps disagree by more than ``tol`` relative."""
    with np.errstate(all="ignore"):
        full = v + dt * _drift(gm, y, v)
        half = v + 0.5 * dt * _drift(gm, y, v)
        half = half + 0.5 * dt * _drift(gm, y, half)
    change = np.linalg.norm(full - v)
    err = np.linalg.norm(full - half)
    if not np.isfinite(err) or (change > 0 and err > tol * change):
        warnings.warn(f"dt_integrate={dt:g} may be too large (half-step discrepancy {err:.3g})", RuntimeWarning, stacklevel=3)


def integrated_free_energy(states) -> float:
    """Trapezoidal time integral of the recorded free energy."""
    if len(states) < 2:
        return float(states[0].free_energy) if states else float("nan")
    t = np.array([s.time for s in states])
    F = np.array([s.free_energy for s in states])
    return float(np.sum(0.5 * (F[1:] + F[:-1]) * np.diff(t)))


def embed_series(times, series, M: int, method: str = "inverse_taylor", start: int | None = None) -> list:
    """Embed every sample from ``start`` (default ``M``) on a uniform time grid."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    if times.size < 2:
        raise NotEnoughSamples("need at least two samples to embed")
    dt = float(times[1] - times[0])
    if np.any(np.abs(np.diff(times) - dt) > 1e-9 * max(1.0, abs(dt))):
        raise EmbeddingError("embedding needs uniformly spaced samples")
    embed = {"inverse_taylor": embed_inverse_taylor, "finite_diff": embed_finite_diff}[method]
    first = M if start is None else start
    return [embed(y, dt, M, i, time=float(times[i])) for i in range(first, y.shape[0])]


def select_order(
    gm_template: GenerativeModel,
    data,
    N_candidates,
    kernel_w,
    kernel_z,
    dt_integrate: float = 1e-3,
):
    """Order ``N`` (with ``M = N``) minimising the time-integrated free energy.

    ``data`` is ``(times, series)`` of raw samples; each candidate embeds it at
    its own order, all starting from the same sample so the runs cover the
    same time window. Candidates whose filter fails are skipped; ties go to
    the smaller order. Returns ``(best_N, {N: integrated F_L})``.
    """
    from .noise import build_gen_cov

    cands = sorted(set(int(n) for n in N_candidates))
    if not cands:
        raise ValueError("need at least one candidate order")
    times, series = data
    d, m = gm_template.state_dim, gm_template.model.obs_dim
    start = max(cands)
    scores = {}
    for N in cands:
        if N > 2 * d:
            warnings.warn(f"order {N} exceeds twice the state dimension", RuntimeWarning, stacklevel=2)
        try:
            gm = gm_template.with_order(
                N, N, build_gen_cov(kernel_w.with_base_dim(d), N), build_gen_cov(kernel_z.with_base_dim(m), N + 1)
            )
            obs = embed_series(times, series, N, start=start)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                states = run_filter(gm, obs, None, dt_integrate)
        except (ArithmeticError, ValueError, FilterError, SingularCovariance, SingularHessian, OutsideLaplaceDomain):
            continue
        if len(states) != len(obs):
            continue
        scores[N] = integrated_free_energy(states)
    if not scores:
        raise FilterError("every candidate order failed")
    best = min(scores, key=lambda n: (scores[n], n))
    return best, scores
