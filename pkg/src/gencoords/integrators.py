"""Pathwise integrators: the zigzag method (exact or linearised flow) and an
Euler baseline driven by Gaussian-convolved white noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .core import GenPoint, taylor_polynomial
from .errors import ShapeError, StepSizeError, ZigzagOverflow
from .flow import ModelSpec, _check_mode, lift_exact
from .noise import GenCov, KernelSpec, build_gen_cov, sample_gen_noise, sample_gen_noise_per_seed

BLOWUP_BOUND = 1e6
METHODS = ("zigzag", "zigzag_linear", "euler_baseline", "least_action")


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    method: str
    seed: int
    blowup_time: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.shape[0] != x.shape[0]:
            raise ShapeError("times and states have different lengths")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ShapeError("times must be strictly increasing")
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)

    @property
    def blew_up(self) -> bool:
        return self.blowup_time is not None


def truncate_blowup(times, states, bound: float = BLOWUP_BOUND):
    """Cut ``states`` before the first row that is non-finite or exceeds ``bound``.

    Returns ``(times, states, blowup_time)`` with ``blowup_time`` ``None`` if
    the whole trajectory stayed bounded.
    """
    states = np.asarray(states)
    with np.errstate(invalid="ignore"):
        bad = ~np.all(np.isfinite(states) & (np.abs(states) <= bound), axis=1)
    if not bad.any():
        return times, states, None
    i = int(np.argmax(bad))
    return times[:i], states[:i], float(times[i])


def _zigzag_batch(model: ModelSpec, z: np.ndarray, w: np.ndarray, mode: str):
    """Zigzag recursion for a batch.

    ``z`` has shape (d, B) and ``w`` shape (N, d, B). Returns coords (N+1, d, B)
    and, per member, the first order that went non-finite (-1 when none).
    """
    _check_mode(mode)
    N, d, B = w.shape
    x = np.zeros((N + 1, d, B))
    x[0] = z
    failed = np.full(B, -1)
    with np.errstate(all="ignore"):
        if mode == "linear" and N > 1:
            J = model.jacobian_f(z)  # (B, d, d)
        for n in range(N):
            if mode == "exact":
                drift = lift_exact(model.flow, x[: n + 1])[n]
            elif n == 0:
                drift = model.f(z)
            else:
                drift = np.einsum("bij,jb->ib", J, x[n])
            x[n + 1] = drift + w[n]
            bad = ~np.all(np.isfinite(x[n + 1]), axis=0) & (failed < 0)
            failed[bad] = n + 1
    return x, failed


def zigzag_solve(model: ModelSpec, z, w0, mode: str = "exact") -> GenPoint:
    """Solve ``x^(n+1) = f^(n)(x^(:n)) + w^(n)`` for n = 0..N-1 with ``x^(0) = z``.

    ``w0`` holds the generalised noise ``(w^(0), ..., w^(N-1))``.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    w = np.asarray(getattr(w0, "coords", w0), dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    d = model.state_dim
    if z.shape != (d,) or w.shape[1] != d:
        raise ShapeError(f"state and noise must have base dimension {d}")
    x, failed = _zigzag_batch(model, z[:, None], w[:, :, None], mode)
    if failed[0] >= 0:
        raise ZigzagOverflow(int(failed[0]), f"non-finite value at order {failed[0]}")
    return GenPoint(x[:, :, 0])


def _noise_cov(kernel: KernelSpec, N: int, d: int) -> GenCov:
    return build_gen_cov(kernel.with_base_dim(d), N)


def zigzag_trajectory(
    model: ModelSpec,
    z,
    kernel: KernelSpec,
    N: int,
    t_grid,
    mode: str = "exact",
    seed: int = 0,
    bound: float = BLOWUP_BOUND,
) -> Trajectory:
    """One zigzag expansion at t = 0, evaluated on ``t_grid`` (no restarts)."""
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or t[0] != 0.0:
        raise ShapeError("t_grid must start at 0")
    d = model.state_dim
    w = sample_gen_noise(_noise_cov(kernel, N, d), seed, 1)[0]
    x = zigzag_solve(model, z, w, mode)
    states = taylor_polynomial(x.coords, t)
    times, states, t_blow = truncate_blowup(t, states, bound)
    method = "zigzag" if mode == "exact" else "zigzag_linear"
    return Trajectory(times, states, method, int(seed), t_blow)


def zigzag_ensemble_states(
    model: ModelSpec,
    z,
    kernel: KernelSpec,
    N: int,
    t_grid,
    mode: str = "exact",
    base_seed: int = 0,
    count: int = 1,
    batch: int = 20000,
):
    """States of ``count`` zigzag trajectories, member ``i`` seeded ``base_seed + i``.

    Returns an array (count, len(t_grid), d); rows after a blow-up or
    overflow are NaN. Member ``i`` matches ``zigzag_trajectory(..., seed=base_seed+i)``
    up to rounding.
    """
    t = np.asarray(t_grid, dtype=float)
    d = model.state_dim
    cov = _noise_cov(kernel, N, d)
    z = np.asarray(z, dtype=float).reshape(d)
    out = np.empty((count, t.size, d))
    for start in range(0, count, batch):
        seeds = np.arange(start, min(start + batch, count)) + base_seed
        w = sample_gen_noise_per_seed(cov, seeds)  # (B, N, d)
        B = len(seeds)
        x, failed = _zigzag_batch(model, np.repeat(z[:, None], B, axis=1), np.moveaxis(w, 0, -1), mode)
        coords = np.moveaxis(x, -1, 0)  # (B, N+1, d)
        with np.errstate(all="ignore"):
            states = _batched_taylor(coords, t)
            bad = ~(np.isfinite(states) & (np.abs(states) <= BLOWUP_BOUND)).all(axis=2)
        bad |= (failed >= 0)[:, None]
        bad = np.logical_or.accumulate(bad, axis=1)
        states[bad] = np.nan
        out[start:start + B] = states
    return out


def _batched_taylor(coords: np.ndarray, t: np.ndarray) -> np.ndarray:
    K = coords.shape[1] - 1
    powers = np.ones((t.size, K + 1))
    for k in range(1, K + 1):
        powers[:, k] = powers[:, k - 1] * t / k
    return np.matmul(powers, coords)


def zigzag_ensemble(model, z, kernel, N, t_grid, mode="exact", base_seed=0, count=1, bound=BLOWUP_BOUND):
    """List of :class:`Trajectory`, member ``i`` seeded ``base_seed + i``."""
    return [zigzag_trajectory(model, z, kernel, N, t_grid, mode, base_seed + i, bound) for i in range(count)]


def convolved_white_noise(sigma: float, dt: float, n_steps: int, d: int, rng, window: float = 6.0) -> np.ndarray:
    """Gaussian-smoothed white noise on ``n_steps`` grid points, shape (n_steps, d).

    White noise is i.i.d. N(0, 1/dt) per cell, generated on the grid extended
    by ``window * sigma`` on both sides, then convolved with the Gaussian
    density of width ``sigma`` truncated at the same window.
    """
    half = int(np.ceil(window * sigma / dt))
    lags = np.arange(-half, half + 1) * dt
    bump = np.exp(-0.5 * (lags / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma) * dt
    white = rng.standard_normal((n_steps + 2 * half, d)) / np.sqrt(dt)
    return fftconvolve(white, bump[:, None], mode="valid", axes=0)


def euler_baseline(
    model: ModelSpec,
    z,
    sigma: float,
    dt: float,
    T: float,
    seed: int = 0,
    noise_scale: float = 1.0,
    bound: float = BLOWUP_BOUND,
) -> Trajectory:
    """Euler integration of ``dx = f(x) dt + w dt`` with ``w`` Gaussian-convolved white noise."""
    if dt <= 0 or T < 0:
        raise StepSizeError("need dt > 0 and T >= 0")
    n = int(round(T / dt)) + 1
    if abs((n - 1) * dt - T) > 1e-9 * max(1.0, T):
        raise StepSizeError(f"dt={dt} does not divide T={T}")
    d = model.state_dim
    rng = np.random.default_rng(seed)
    w = noise_scale * convolved_white_noise(sigma, dt, n, d, rng)
    x = np.empty((n, d))
    x[0] = np.asarray(z, dtype=float).reshape(d)
    times = np.arange(n) * dt
    with np.errstate(all="ignore"):
        for k in range(n - 1):
            x[k + 1] = x[k] + dt * (model.f(x[k]) + w[k])
            if not (np.all(np.isfinite(x[k + 1])) and np.max(np.abs(x[k + 1])) <= bound):
                return Trajectory(times[: k + 1], x[: k + 1], "euler_baseline", int(seed), float(times[k + 1]))
    return Trajectory(times, x, "euler_baseline", int(seed))
