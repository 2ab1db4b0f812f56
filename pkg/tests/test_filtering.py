import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from math import factorial

from gencoords.core import GenPoint, shift_drop_matrix
from gencoords.errors import FilterError, NotEnoughSamples, SingularHessian, StepSizeError
from gencoords.expr import var
from gencoords.filtering import (
    GenerativeModel,
    GenObservation,
    default_mu0,
    embed_finite_diff,
    embed_inverse_taylor,
    embed_series,
    energy,
    energy_grad,
    energy_hessian,
    free_energy_grad,
    integrated_free_energy,
    laplace_free_energy,
    logdet_grad,
    optimal_cov,
    prediction_errors,
    run_filter,
    select_order,
)
from gencoords.flow import custom, linear, lorenz
from gencoords.integrators import zigzag_solve
from gencoords.noise import GenCov, KernelSpec, build_gen_cov

from oracles import fd_gradient, rel_err


def make_gm(model, N, M, sigma_w=1.0, sigma_z=1.0, scale_w=1.0, scale_z=1.0, lam=1.0, mode="linear"):
    d, m = model.state_dim, model.obs_dim
    return GenerativeModel(
        model, N, M,
        build_gen_cov(KernelSpec.gaussian(sigma_w, base_dim=d, scale=scale_w), N),
        build_gen_cov(KernelSpec.gaussian(sigma_z, base_dim=m, scale=scale_z), M + 1),
        lam, mode,
    )


def lorenz_gm(mode="linear", N=4, M=4):
    return make_gm(lorenz(obs="sum", time_scale=1 / 32), N, M, sigma_w=0.5, sigma_z=0.5, scale_z=0.1, mode=mode)


def random_obs(rng, gm):
    return GenObservation(0.0, rng.normal(size=(gm.M + 1, gm.model.obs_dim)))


def random_mu(rng, gm, scale=1.0):
    return GenPoint(scale * rng.normal(size=(gm.N + 1, gm.state_dim)))


# embedding -------------------------------------------------------------------


def test_finite_diff_examples():
    assert np.allclose(embed_finite_diff([1.0, 2.0], 0.5, 1, 1).coords[:, 0], [2.0, 2.0])
    assert not np.any(embed_finite_diff(np.full(6, 3.0), 0.1, 4, 5).coords[1:])
    dt, k = 0.01, 50
    t = np.arange(k + 1) * dt
    c = embed_finite_diff(t ** 2, dt, 2, k).coords[:, 0]
    assert np.allclose(c, [t[k] ** 2, 2 * t[k] - dt, 2.0], rtol=1e-9, atol=1e-9)


def test_embedding_needs_history():
    with pytest.raises(NotEnoughSamples):
        embed_finite_diff([1.0, 2.0], 0.1, 2, 1)
    with pytest.raises(NotEnoughSamples):
        embed_inverse_taylor([1.0, 2.0, 3.0], 0.1, 3, 2)


def test_inverse_taylor_order_one_is_backward_difference():
    y = np.random.default_rng(0).normal(size=(5, 2))
    a = embed_inverse_taylor(y, 0.2, 1, 3).coords
    b = embed_finite_diff(y, 0.2, 1, 3).coords
    assert np.allclose(a, b, rtol=1e-14)


@given(st.integers(0, 6), st.floats(1e-3, 0.5), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_inverse_taylor_recovers_polynomial_derivatives(M, dt, seed):
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=M + 1)  # derivatives at the newest sample
    k = M + 3
    t = (np.arange(k + 1) - k) * dt  # newest sample at t = 0
    y = sum(coef[n] * t ** n / factorial(n) for n in range(M + 1))
    got = embed_inverse_taylor(y, dt, M, k).coords[:, 0]
    # derivative n amplifies sample rounding by dt^-n
    tol = 1e-9 * np.maximum(1.0, np.abs(coef)) * (1.0 + np.max(np.abs(y)) * dt ** -np.arange(M + 1.0) * 1e-3)
    assert np.all(np.abs(got - coef) <= tol)
    # its Taylor polynomial interpolates the latest samples
    back = [sum(got[n] * (-i * dt) ** n / factorial(n) for n in range(M + 1)) for i in range(M + 1)]
    assert np.allclose(back, y[k - M:][::-1], rtol=1e-9, atol=1e-9)


def test_inverse_taylor_on_sine():
    dt, k = 0.01, 100
    t = np.arange(k + 1) * dt
    c = embed_inverse_taylor(np.sin(t), dt, 3, k).coords[:, 0]
    s = t[k]
    want = [np.sin(s), np.cos(s), -np.sin(s), -np.cos(s)]
    # interpolation error of derivative n is O(dt^(4-n)); the top order is O(dt)
    assert np.all(np.abs(c - want) <= 2 * dt)


def test_embed_series_shapes_and_uniform_grid():
    t = np.arange(10) * 0.1
    y = np.column_stack([np.sin(t), np.cos(t)])
    obs = embed_series(t, y, 2)
    assert len(obs) == 8 and obs[0].time == pytest.approx(0.2) and obs[0].coords.shape == (3, 2)
    from gencoords.errors import EmbeddingError

    with pytest.raises(EmbeddingError):
        embed_series(np.array([0.0, 0.1, 0.3]), np.zeros(3), 1)


# energy ----------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_energy_vanishes_on_consistent_state(mode):
    gm = lorenz_gm(mode)
    x = zigzag_solve(gm.model, [1.0, 2.0, 20.0], np.zeros((gm.N, 3)), mode)
    from gencoords.flow import gen_likelihood

    y = GenObservation(0.0, gen_likelihood(gm.model, x, gm.M, mode))
    assert energy(gm, y, x) == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(energy_grad(gm, y, x).coords)) <= 1e-6


def linear_toy(rng, N=3, M=2, d=2, m=2):
    A = rng.normal(size=(d, d))
    C = rng.normal(size=(m, d))
    model = linear(A, obs=C)
    gm = make_gm(model, N, M, sigma_w=0.7, sigma_z=1.3, scale_z=0.5)
    Fm = np.kron(np.eye(N, N + 1), A)
    Gm = np.kron(np.eye(M + 1, N + 1), C)
    B = shift_drop_matrix(N, d) - Fm
    return gm, Gm, B


def dense_energy(gm, Gm, B, y, v):
    ey = y.coords.ravel() - Gm @ v
    ex = B @ v
    return 0.5 * ey @ np.linalg.solve(gm.cov_z.matrix, ey) + 0.5 * ex @ np.linalg.solve(gm.cov_w.matrix, ex)


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_linear_model_matches_dense_quadratic(mode):
    rng = np.random.default_rng(0)
    gm, Gm, B = linear_toy(rng)
    gm = GenerativeModel(gm.model, gm.N, gm.M, gm.cov_w, gm.cov_z, 1.0, mode)
    y, mu = random_obs(rng, gm), random_mu(rng, gm)
    v = mu.flat()
    assert energy(gm, y, mu) == pytest.approx(dense_energy(gm, Gm, B, y, v), rel=1e-12)
    Pz, Pw = np.linalg.inv(gm.cov_z.matrix), np.linalg.inv(gm.cov_w.matrix)
    H = Gm.T @ Pz @ Gm + B.T @ Pw @ B
    grad = H @ v - Gm.T @ Pz @ y.coords.ravel()
    assert rel_err(energy_grad(gm, y, mu).flat(), grad) < 1e-10
    assert rel_err(energy_hessian(gm, y, mu), H) < (1e-10 if mode == "linear" else 1e-5)
    assert rel_err(energy_hessian(gm, y, random_mu(rng, gm)), H) < (1e-10 if mode == "linear" else 1e-5)


def test_doubling_observation_covariance_halves_likelihood_term():
    rng = np.random.default_rng(1)
    gm, *_ = linear_toy(rng)
    y, mu = random_obs(rng, gm), random_mu(rng, gm)
    ey, ex = prediction_errors(gm, y, mu)
    prior = 0.5 * ex @ gm.prec_w @ ex
    doubled = GenerativeModel(gm.model, gm.N, gm.M, gm.cov_w, GenCov(gm.M + 1, 2, 2 * gm.cov_z.matrix))
    assert energy(doubled, y, mu) - prior == pytest.approx(0.5 * (energy(gm, y, mu) - prior), rel=1e-12)


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_gradient_matches_fd_of_mode_consistent_energy(mode):
    gm = lorenz_gm(mode)
    rng = np.random.default_rng(2)
    for _ in range(20):
        y, mu = random_obs(rng, gm), random_mu(rng, gm, 3.0)
        at = GenPoint(mu.coords) if mode == "linear" else None
        fd = fd_gradient(lambda v: energy(gm, y, GenPoint.from_flat(v, 3), at), mu.flat())
        assert rel_err(energy_grad(gm, y, mu).flat(), fd) <= 1e-4


def second_difference_hessian(fun, v, rel_step=1e-2):
    n = v.size
    H = np.empty((n, n))
    h = rel_step * (1.0 + np.abs(v))
    for i in range(n):
        for j in range(n):
            def at(si, sj):
                w = v.copy()
                w[i] += si * h[i]
                w[j] += sj * h[j]
                return fun(w)

            H[i, j] = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h[i] * h[j])
    return H


def test_linear_mode_hessian_matches_fd_of_frozen_energy():
    gm = lorenz_gm("linear", N=2, M=2)
    rng = np.random.default_rng(3)
    for _ in range(5):
        y, mu = random_obs(rng, gm), random_mu(rng, gm, 3.0)
        at = GenPoint(mu.coords)
        fd = second_difference_hessian(lambda v: energy(gm, y, GenPoint.from_flat(v, 3), at), mu.flat())
        assert rel_err(energy_hessian(gm, y, mu), fd) <= 1e-4


def test_hessian_identity_obs_no_flow_unit_covariances():
    N, d = 3, 2
    model = custom([0.0 * var(0), 0.0 * var(1)], obs="identity")
    gm = GenerativeModel(model, N, N, GenCov(N, d, np.eye(N * d)), GenCov(N + 1, d, np.eye((N + 1) * d)))
    Dp = shift_drop_matrix(N, d)
    H = energy_hessian(gm, GenObservation(0.0, np.zeros((N + 1, d))), GenPoint.zeros(N, d))
    assert np.allclose(H, np.eye((N + 1) * d) + Dp.T @ Dp)


def test_hessian_symmetric_psd_in_linear_mode():
    gm = lorenz_gm("linear")
    rng = np.random.default_rng(4)
    H = energy_hessian(gm, random_obs(rng, gm), random_mu(rng, gm, 5.0))
    assert np.array_equal(H, H.T) and np.linalg.eigvalsh(H)[0] >= -1e-9 * np.abs(H).max()


# covariance and free energy -------------------------------------------------


def test_optimal_cov_examples():
    assert np.allclose(optimal_cov(2 * np.eye(3)), 0.5 * np.eye(3))
    rng = np.random.default_rng(5)
    B = rng.normal(size=(6, 6))
    H = B @ B.T + 0.1 * np.eye(6)
    S = optimal_cov(H)
    assert np.allclose(S, S.T) and np.allclose(H @ S, np.eye(6), atol=1e-8)


def test_optimal_cov_jitter_warns_and_singular_raises():
    H = np.diag([1.0, 1e-20])
    H[1, 1] = -1e-14
    with pytest.warns(RuntimeWarning):
        _, eps = optimal_cov(H, return_jitter=True)
    assert eps > 0
    with pytest.raises(SingularHessian):
        optimal_cov(-np.eye(2))


def test_free_energy_at_quadratic_minimiser():
    rng = np.random.default_rng(6)
    gm, Gm, B = linear_toy(rng)
    y = random_obs(rng, gm)
    Pz, Pw = np.linalg.inv(gm.cov_z.matrix), np.linalg.inv(gm.cov_w.matrix)
    H = Gm.T @ Pz @ Gm + B.T @ Pw @ B
    v = np.linalg.solve(H, Gm.T @ Pz @ y.coords.ravel())
    mu = GenPoint.from_flat(v, 2)
    assert np.max(np.abs(energy_grad(gm, y, mu).flat())) <= 1e-9 * np.abs(H).max()
    n = v.size
    want = dense_energy(gm, Gm, B, y, v) + 0.5 * np.linalg.slogdet(H)[1] - 0.5 * n * np.log(2 * np.pi * np.e)
    assert laplace_free_energy(gm, y, mu) == pytest.approx(want, rel=1e-10)


def gaussian_neg_log_expectation(P, logdet_cov, resid, S_proj):
    """E_q[-log N(r; 0, C)] with r affine in x, C^-1 = P, mean residual ``resid`` and projected covariance."""
    k = resid.size
    return 0.5 * (k * np.log(2 * np.pi) + logdet_cov + resid @ P @ resid + np.trace(P @ S_proj))


@pytest.mark.parametrize("seed", range(3))
def test_free_energy_complexity_accuracy_decomposition(seed):
    rng = np.random.default_rng(10 + seed)
    gm, Gm, B = linear_toy(rng)
    y, mu = random_obs(rng, gm), random_mu(rng, gm)
    v = mu.flat()
    n = v.size
    Cz, Cw = gm.cov_z.matrix, gm.cov_w.matrix
    Pz, Pw = np.linalg.inv(Cz), np.linalg.inv(Cw)
    S = np.linalg.inv(Gm.T @ Pz @ Gm + B.T @ Pw @ B)
    # accuracy term: E_q[-log p(y | x)]
    inaccuracy = gaussian_neg_log_expectation(Pz, np.linalg.slogdet(Cz)[1], y.coords.ravel() - Gm @ v, Gm @ S @ Gm.T)
    # complexity: KL(q || p) with p the density of the state noise B x (flat on order 0)
    cross = gaussian_neg_log_expectation(Pw, np.linalg.slogdet(Cw)[1], B @ v, B @ S @ B.T)
    entropy = 0.5 * (n * np.log(2 * np.pi * np.e) + np.linalg.slogdet(S)[1])
    complexity = cross - entropy
    # the Laplace expression omits the Gaussian normalisers and the n/2 trace term
    offset = 0.5 * n + 0.5 * (np.linalg.slogdet(2 * np.pi * Cz)[1] + np.linalg.slogdet(2 * np.pi * Cw)[1])
    assert laplace_free_energy(gm, y, mu) == pytest.approx(complexity + inaccuracy - offset, rel=1e-10)


def test_doubling_covariances_shifts_free_energy():
    rng = np.random.default_rng(7)
    gm, *_ = linear_toy(rng)
    y, mu = random_obs(rng, gm), random_mu(rng, gm)
    double = GenerativeModel(
        gm.model, gm.N, gm.M, GenCov(gm.N, 2, 2 * gm.cov_w.matrix), GenCov(gm.M + 1, 2, 2 * gm.cov_z.matrix)
    )
    V = energy(gm, y, mu)
    n = gm.size
    # V halves and log det H drops by n log 2
    want = laplace_free_energy(gm, y, mu) - 0.5 * V - 0.5 * n * np.log(2)
    assert laplace_free_energy(double, y, mu) == pytest.approx(want, rel=1e-10)


def test_logdet_grad_linear_mode_is_exact_zero():
    gm = lorenz_gm("linear")
    rng = np.random.default_rng(8)
    y, mu = random_obs(rng, gm), random_mu(rng, gm, 4.0)
    g = logdet_grad(gm, y, mu)
    assert not np.any(g.coords)
    assert np.array_equal(free_energy_grad(gm, y, mu).coords, energy_grad(gm, y, mu).coords)


def test_logdet_grad_exact_mode_linear_model_vanishes():
    rng = np.random.default_rng(9)
    gm, *_ = linear_toy(rng, N=2, M=1)
    gm = GenerativeModel(gm.model, gm.N, gm.M, gm.cov_w, gm.cov_z, 1.0, "exact")
    H = energy_hessian(gm, random_obs(rng, gm), random_mu(rng, gm))
    g = logdet_grad(gm, random_obs(rng, gm), random_mu(rng, gm))
    assert np.max(np.abs(g.coords)) <= 1e-6 * np.abs(H).max()


def test_logdet_grad_exact_mode_quadratic_flow():
    model = custom([-(var(0) ** 2)], obs="identity")
    gm = make_gm(model, 2, 2, mode="exact")
    rng = np.random.default_rng(10)
    y = random_obs(rng, gm)
    mu = GenPoint([0.8, -0.3, 0.5])

    def logdet(v):
        return np.linalg.slogdet(energy_hessian(gm, y, GenPoint.from_flat(v, 1)))[1]

    fd = fd_gradient(logdet, mu.flat(), rel_step=1e-3)
    assert rel_err(logdet_grad(gm, y, mu).flat(), fd) <= 1e-3


# the filter --------------------------------------------------------------------


def test_static_scenario_converges_to_observation():
    N = 2
    model = custom([0.0 * var(0)], obs="identity")
    gm = make_gm(model, N, N, scale_w=1e6)
    y = np.array([[2.5], [0.0], [0.0]])
    obs = [GenObservation(t, y) for t in np.arange(0, 10.01, 0.5)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        states = run_filter(gm, obs, None, 1e-3)
    assert states[-1].mu.coords[0, 0] == pytest.approx(2.5, rel=0.01)


def test_linear_gaussian_stationary_mean_matches_posterior():
    N = M = 2
    model = linear([[-1.0]], obs="identity")
    gm = make_gm(model, N, M, scale_z=0.1)
    y = GenObservation(0.0, [[1.0], [0.0], [0.0]])
    obs = [GenObservation(t, y.coords) for t in np.arange(0, 20.01, 0.5)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        states = run_filter(gm, obs, GenPoint.zeros(N, 1), 1e-3)
    # closed-form Gaussian conditioning: posterior mean solves H mu = G^T Pz y
    Gm = np.eye(3)
    Bm = shift_drop_matrix(N, 1) - np.kron(np.eye(N, N + 1), [[-1.0]])
    H = Gm.T @ gm.prec_z @ Gm + Bm.T @ gm.prec_w @ Bm
    post = np.linalg.solve(H, Gm.T @ gm.prec_z @ y.coords.ravel())
    assert states[-1].mu.coords[0, 0] == pytest.approx(post[0], rel=0.02)


def test_free_energy_descends_under_constant_observations():
    model = linear([[-0.5]], obs="identity")
    gm = make_gm(model, 2, 2)
    y = GenObservation(0.0, [[1.0], [0.3], [-0.2]])
    from gencoords.filtering import _drift

    v = np.array([3.0, -1.0, 2.0])
    dt = 1e-4
    F = laplace_free_energy(gm, y, GenPoint.from_flat(v, 1))
    for _ in range(2000):
        v = v + dt * (_drift(gm, y, v) - (np.append(v[1:], 0.0)))  # gradient part only
        F_new = laplace_free_energy(gm, y, GenPoint.from_flat(v, 1))
        assert F_new <= F + 1e-8
        F = F_new


def test_filter_states_are_consistent_and_deterministic():
    gm = lorenz_gm("linear")
    rng = np.random.default_rng(11)
    obs = [GenObservation(0.1 * i, rng.normal(size=(gm.M + 1, 1))) for i in range(6)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = run_filter(gm, obs, None, 1e-3)
        b = run_filter(gm, obs, None, 1e-3)
    assert len(a) == 6
    for s, t in zip(a, b):
        assert np.array_equal(s.mu.coords, t.mu.coords) and s.free_energy == t.free_energy
        H = energy_hessian(gm, obs[0] if s.time == 0 else next(o for o in obs if o.time == s.time), s.mu)
        assert np.array_equal(s.sigma, s.sigma.T)
        assert np.max(np.abs(H @ s.sigma - np.eye(gm.size))) <= 1e-6


def test_filter_input_validation():
    gm = lorenz_gm("linear")
    y = np.zeros((gm.M + 1, 1))
    with pytest.raises(FilterError):
        run_filter(gm, [GenObservation(0.2, y), GenObservation(0.1, y)])
    with pytest.raises(StepSizeError):
        run_filter(gm, [GenObservation(0.0, y), GenObservation(0.1, y)], None, 0.03)
    assert run_filter(gm, []) == []


def test_default_mu0_pseudo_inverse():
    gm = lorenz_gm("linear")
    mu = default_mu0(gm, GenObservation(0.0, [[6.0], [1.0], [0.0], [0.0], [0.0]]))
    assert np.allclose(mu.coords[0], [2.0, 2.0, 2.0]) and not np.any(mu.coords[1:])


def test_filter_truncates_on_divergence():
    model = linear([[-1.0]], obs="identity")
    gm = make_gm(model, 1, 1)
    obs = [GenObservation(float(t), [[1e12 if t else 0.0], [0.0]]) for t in range(5)]
    with pytest.warns(RuntimeWarning, match="diverged"):
        states = run_filter(gm, obs, None, 1e-3)
    assert len(states) == 2


# order selection ---------------------------------------------------------------


def ar_data(T=20.0, dt=0.1, seed=0):
    from gencoords.scenarios import synthesize

    # smooth state and observation noise of equal size
    model = linear([[-1.0]], obs="identity")
    kw = KernelSpec.gaussian(0.5)
    kz = KernelSpec.gaussian(0.5)
    t, _, y = synthesize(model, [1.0], kw, kz, T, 0.01, dt, seed)
    return model, kw, kz, t, y


def test_select_order_single_candidate():
    model, kw, kz, t, y = ar_data()
    gm = make_gm(model, 2, 2)
    best, scores = select_order(gm, (t, y), [2], kw, kz)
    assert best == 2 and set(scores) == {2}


@pytest.mark.parametrize("seed", [0, 1])
def test_select_order_prefers_two_over_one_on_smooth_linear_data(seed):
    model, kw, kz, t, y = ar_data(seed=seed)
    gm = make_gm(model, 2, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        best, scores = select_order(gm, (t, y), [1, 2], kw, kz)
    assert scores[2] <= scores[1]
    assert best == 2


def test_select_order_warns_above_twice_dimension():
    model, kw, kz, t, y = ar_data(T=2.0)
    gm = make_gm(model, 2, 2)
    with pytest.warns(RuntimeWarning, match="3"):
        select_order(gm, (t, y), [3], kw, kz)


def test_integrated_free_energy_trapezoid():
    from gencoords.filtering import FilterState

    states = [FilterState(t, GenPoint([0.0, 0.0]), np.eye(2), F) for t, F in [(0.0, 1.0), (1.0, 3.0), (3.0, 3.0)]]
    assert integrated_free_energy(states) == pytest.approx(2.0 + 6.0)
