"""End-to-end scenarios shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import build_kernel, build_model
from .errors import ConfigError
from .filtering import GenerativeModel, embed_series, run_filter, select_order
from .core import GenPoint
from .integrators import convolved_white_noise, euler_baseline, zigzag_solve
from .noise import KernelSpec, build_gen_cov


def synthesize(model, z, kernel_w: KernelSpec, kernel_z: KernelSpec, T, dt_sim, dt_obs, seed):
    """Simulate latent states and noisy observations, sampled every ``dt_obs``.

    Latent noise and observation noise are Gaussian-convolved white noise with
    the kernels' widths and variance scales. Returns ``(times, truth, series)``.
    """
    for k in (kernel_w, kernel_z):
        if k.family != "gaussian":
            raise ConfigError("kernel", "synthetic data needs gaussian kernels")
    stride = int(round(dt_obs / dt_sim))
    if stride < 1 or abs(stride * dt_sim - dt_obs) > 1e-9 * dt_obs:
        raise ConfigError("dt_sim", "must divide dt_obs")
    traj = euler_baseline(model, z, kernel_w.sigma, dt_sim, T, seed, noise_scale=np.sqrt(kernel_w.scale))
    if traj.blew_up:
        raise ConfigError("T", f"synthetic trajectory blew up at t={traj.blowup_time:g}")
    rng = np.random.default_rng([seed, 1])
    noise = np.sqrt(kernel_z.scale) * convolved_white_noise(kernel_z.sigma, dt_sim, traj.times.size, model.obs_dim, rng)
    y = model.g(traj.states.T).T + noise
    return traj.times[::stride], traj.states[::stride], y[::stride]


def pinv_baseline(model, series) -> np.ndarray:
    """Dynamics-free estimate: observation pseudo-inverse (about the origin) per sample."""
    zero = np.zeros(model.state_dim)
    P = np.linalg.pinv(model.jacobian_g(zero))
    return (np.asarray(series) - model.g(zero)) @ P.T


def prior_mean(model, z, N) -> GenPoint:
    """Noise-free generalised state lifted from the initial condition ``z``."""
    return zigzag_solve(model, np.asarray(z, dtype=float), np.zeros((N, model.state_dim)), "exact")


def rms_error(est, truth) -> np.ndarray:
    """Per-time root mean square over components."""
    return np.sqrt(np.mean((np.asarray(est) - np.asarray(truth)) ** 2, axis=1))


@dataclass
class FilterRun:
    times: np.ndarray
    mu0: np.ndarray
    free_energy: np.ndarray
    truth: np.ndarray | None
    baseline: np.ndarray | None
    n_obs: int
    chosen_order: int | None = None
    order_scores: dict | None = None

    @property
    def complete(self) -> bool:
        return len(self.times) == self.n_obs

    def rmse(self) -> float | None:
        if self.truth is None:
            return None
        return float(np.sqrt(np.mean((self.mu0 - self.truth[: len(self.mu0)]) ** 2)))

    def baseline_rmse(self) -> float | None:
        if self.truth is None:
            return None
        return float(np.sqrt(np.mean((self.baseline - self.truth[: len(self.baseline)]) ** 2)))


def filter_run(cfg: dict, data=None) -> FilterRun:
    """Run the filter described by a resolved ``filter`` config.

    ``data`` is ``(times, series)`` or ``(times, series, truth)`` for recorded
    observations; synthetic data is generated otherwise.
    """
    model = build_model(cfg, obs=cfg.get("obs"))
    if model.obs_map is None:
        raise ConfigError("obs", "filter needs an observation map")
    kw = build_kernel(cfg["kernel_w"], "kernel_w")
    kz = build_kernel(cfg["kernel_z"], "kernel_z")
    truth = None
    if data is None:
        times, truth, series = synthesize(
            model, cfg["z"], kw, kz, cfg["T"], cfg["dt_sim"], cfg["dt_obs"], cfg["seed"]
        )
    else:
        times, series = np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)
        if len(data) > 2 and data[2] is not None:
            truth = np.asarray(data[2], dtype=float)
    series = series.reshape(len(times), -1)
    if series.shape[1] != model.obs_dim:
        raise ConfigError("data_path", f"expected {model.obs_dim} observation columns, got {series.shape[1]}")
    d, m = model.state_dim, model.obs_dim
    N, M = cfg["N"], cfg["M"]
    chosen, scores = None, None
    template = GenerativeModel(
        model, N, M,
        build_gen_cov(kw.with_base_dim(d), N), build_gen_cov(kz.with_base_dim(m), M + 1),
        cfg["lambda"], cfg["mode"],
    )
    start = M
    if cfg.get("select_order"):
        chosen, scores = select_order(template, (times, series), cfg["select_order"], kw, kz, cfg["dt_integrate"])
        N = M = chosen
        start = max(cfg["select_order"])
        template = template.with_order(N, M, build_gen_cov(kw.with_base_dim(d), N), build_gen_cov(kz.with_base_dim(m), M + 1))
    obs = embed_series(times, series, M, cfg["embedding"], start=start)
    mu0 = prior_mean(model, cfg["z"], N) if cfg.get("mu0", "prior") == "prior" else None
    states = run_filter(template, obs, mu0, cfg["dt_integrate"])
    k = len(states)
    t = np.array([s.time for s in states])
    mu0 = np.array([s.mu.coords[0] for s in states]).reshape(k, d)
    F = np.array([s.free_energy for s in states])
    tr = None if truth is None else truth[start: start + k]
    base = pinv_baseline(model, series[start: start + k]) if truth is not None else None
    return FilterRun(t, mu0, F, tr, base, len(obs), chosen, scores)
