import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from gencoords.config import LINEAR2D_A
from gencoords.core import GenPoint, shift_drop_matrix, shift_matrix
from gencoords.errors import ShapeError, SingularCovariance, StepSizeError
from gencoords.expr import var
from gencoords.flow import custom, gen_jacobian, linear, lorenz
from gencoords.integrators import zigzag_solve
from gencoords.least_action import (
    LagrangianContext,
    flow_residual,
    lagrangian,
    lagrangian_grad,
    least_action_state,
    regularized_descent,
)
from gencoords.noise import GenCov, KernelSpec, build_gen_cov

from oracles import fd_gradient, rel_err


def ctx_for(model, N, sigma=1.0, mode="linear"):
    return LagrangianContext(model, build_gen_cov(KernelSpec.gaussian(sigma, base_dim=model.state_dim), N), mode)


def dense_lagrangian(model, cov, x):
    """(D'x - F x)^T (2 Sigma)^-1 (D'x - F x) for a linear flow, from dense matrices."""
    N, d = x.order, x.base_dim
    A = np.asarray(model.params["A"])
    F = np.kron(np.eye(N, N + 1), A)
    r = (shift_drop_matrix(N, d) - F) @ x.flat()
    return float(r @ np.linalg.solve(2 * cov.matrix, r)), shift_drop_matrix(N, d) - F


def test_scalar_substitution():
    ctx = LagrangianContext(custom([0.0 * var(0)]), GenCov(1, 1, np.array([[0.5]])), "exact")
    z, r = 0.4, -1.7
    assert lagrangian(ctx, GenPoint([z, r])) == pytest.approx(r * r)


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_least_action_state_is_a_zero(mode):
    ctx = ctx_for(lorenz(), 5, mode=mode)
    x = least_action_state(ctx, [1.0, -2.0, 20.0])
    scale = 1.0 + np.abs(x.coords[1:]).ravel()
    assert np.max(np.abs(flow_residual(ctx, x)) / scale) <= 1e-10
    assert lagrangian(ctx, x) <= 1e-12
    g = lagrangian_grad(ctx, x).coords
    assert np.max(np.abs(g)) <= 1e-10 * np.abs(ctx.precision).max() * scale.max()


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_zero_iff_residual_vanishes(mode):
    ctx = ctx_for(lorenz(), 4, mode=mode)
    rng = np.random.default_rng(0)
    x = least_action_state(ctx, rng.normal(size=3))
    for n in range(1, 5):
        c = x.coords.copy()
        c[n] += 1e-3 * rng.normal(size=3)
        assert lagrangian(ctx, GenPoint(c)) > 0.0


def test_dense_oracle_value_and_gradient_linear_flow():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(2, 2))
    model = linear(A)
    cov = build_gen_cov(KernelSpec.gaussian(0.8, base_dim=2), 4)
    x = GenPoint(rng.normal(size=(5, 2)))
    want, B = dense_lagrangian(model, cov, x)
    grad_want = B.T @ np.linalg.solve(cov.matrix, B @ x.flat())
    for mode in ("exact", "linear"):
        ctx = LagrangianContext(model, cov, mode)
        assert lagrangian(ctx, x) == pytest.approx(want, rel=1e-10)
        assert rel_err(lagrangian_grad(ctx, x).flat(), grad_want) < 1e-10


@pytest.mark.parametrize("mode", ["exact", "linear"])
def test_gradient_matches_fd_on_lorenz(mode):
    ctx = ctx_for(lorenz(), 4, sigma=0.5, mode=mode)
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = GenPoint(rng.normal(size=(5, 3)))
        at = x if mode == "exact" else GenPoint(x.coords)
        fd = fd_gradient(lambda v: lagrangian(ctx, GenPoint.from_flat(v, 3), at if mode == "linear" else None), x.flat())
        assert rel_err(lagrangian_grad(ctx, x).flat(), fd) <= 1e-4


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_lagrangian_non_negative(seed):
    rng = np.random.default_rng(seed)
    ctx = ctx_for(lorenz(), 3)
    assert lagrangian(ctx, GenPoint(rng.normal(size=(4, 3)) * 5)) >= 0.0


def test_context_validation():
    with pytest.raises(ShapeError):
        LagrangianContext(lorenz(), build_gen_cov(KernelSpec.gaussian(1.0, base_dim=2), 3))
    with pytest.raises(ShapeError):
        lagrangian(ctx_for(lorenz(), 3), GenPoint(np.zeros((3, 3))))
    zero = GenCov(2, 1, np.zeros((2, 2)))
    with pytest.raises(SingularCovariance):
        LagrangianContext(linear([[1.0]]), zero)


def test_descent_without_weight_is_free_flow_under_euler():
    ctx = ctx_for(linear(LINEAR2D_A), 3, sigma=0.5)
    z = [10.0, 10.0]
    dt, T = 1e-3, 0.5
    traj, _ = regularized_descent(ctx, z, 0.0, dt, T)
    x0 = least_action_state(ctx, z)
    step = np.eye(8) + dt * shift_matrix(3, 2)
    v = x0.flat()
    for k in range(len(traj.times)):
        assert np.allclose(traj.states[k], v[:2], rtol=0, atol=1e-12)
        v = step @ v
    # and within O(dt) of exact Taylor extrapolation
    M = expm(T * shift_matrix(3, 2))
    assert np.max(np.abs(traj.states[-1] - (M @ x0.flat())[:2])) <= 10 * dt * np.abs(x0.coords).max()


def test_descent_step_guard():
    ctx = ctx_for(linear(LINEAR2D_A), 3, sigma=0.5)
    with pytest.raises(StepSizeError):
        regularized_descent(ctx, [1.0, 1.0], 100.0, dt=1e-2, T=1.0)


def test_descent_records_blowup():
    ctx = ctx_for(linear([[40.0]]), 3)
    traj, trace = regularized_descent(ctx, [1.0], 1.0, dt=1e-3, T=2.0, bound=1e3)
    assert traj.blew_up and len(trace) == len(traj.times)


@pytest.mark.slow
def test_lambda_sweep_trace_and_deviation_ordering():
    ctx = ctx_for(linear(LINEAR2D_A), 3, sigma=0.5)
    z = np.array([10.0, 10.0])
    A = np.asarray(LINEAR2D_A)
    traces, devs = [], []
    for lam in (1.0, 10.0, 100.0):
        traj, trace = regularized_descent(ctx, z, lam, dt=1e-4, T=2.0)
        ref = np.array([expm(A * t) @ z for t in traj.times[::100]])
        devs.append(np.max(np.abs(traj.states[::100] - ref)))
        traces.append(trace)
    assert devs[0] > devs[1] > devs[2]
    assert devs[2] < 0.2 * devs[0]
    for lo, hi in zip(traces, traces[1:]):
        assert np.all(hi[10:] <= lo[10:] + 1e-12)
