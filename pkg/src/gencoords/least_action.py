"""The Lagrangian of a generalised state and the regularised descent that
pulls the free generalised flow towards the path of least action."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import inverse_from_cholesky
from .core import GenPoint, shift_drop_matrix, shift_matrix
from .errors import ShapeError, SingularCovariance, StepSizeError
from .flow import ModelSpec, _check_mode, gen_flow, gen_flow_affine, gen_jacobian
from .integrators import BLOWUP_BOUND, Trajectory, zigzag_solve
from .noise import GenCov

MAX_LAMBDA_DT = 0.5


@dataclass(frozen=True, eq=False)
class LagrangianContext:
    """Flow model, fluctuation covariance of order ``N`` and the lift mode."""

    model: ModelSpec
    gen_cov: GenCov
    mode: str = "linear"
    precision: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _check_mode(self.mode)
        if self.gen_cov.base_dim != self.model.state_dim:
            raise ShapeError("covariance base dimension does not match the model")
        L, _ = self.gen_cov.cholesky
        if L is None:
            raise SingularCovariance("fluctuation covariance is singular after jitter")
        object.__setattr__(self, "precision", inverse_from_cholesky(L))

    @property
    def order(self) -> int:
        return self.gen_cov.order

    def _check(self, x: GenPoint):
        if x.order != self.order or x.base_dim != self.model.state_dim:
            raise ShapeError(f"expected a point of order {self.order} and dimension {self.model.state_dim}")


def flow_residual(ctx: LagrangianContext, x: GenPoint, at: GenPoint | None = None) -> np.ndarray:
    """Flattened ``D'x - f(x)``; in linear mode the lift is frozen at ``at`` (default ``x``)."""
    if ctx.mode == "linear":
        fx = gen_flow_affine(ctx.model, x, x if at is None else at)
    else:
        fx = gen_flow(ctx.model, x, "exact")
    return (x.coords[1:] - fx).ravel()


def lagrangian(ctx: LagrangianContext, x: GenPoint, at: GenPoint | None = None) -> float:
    """``r^T (2 Sigma)^-1 r`` with ``r = D'x - f(x)``."""
    ctx._check(x)
    r = flow_residual(ctx, x, at)
    return float(0.5 * r @ ctx.precision @ r)


def lagrangian_grad(ctx: LagrangianContext, x: GenPoint) -> GenPoint:
    """``(D' - grad f(x))^T Sigma^-1 (D'x - f(x))``."""
    ctx._check(x)
    return GenPoint(_value_and_grad(ctx, x)[1])


def _value_and_grad(ctx: LagrangianContext, x: GenPoint):
    N, d = x.order, x.base_dim
    if ctx.mode == "linear":
        c = x.coords
        J = ctx.model.jacobian_f(c[0])
        fx = np.empty((N, d))
        fx[0] = ctx.model.f(c[0])
        fx[1:] = c[1:N] @ J.T
        r = (c[1:] - fx).ravel()
        s = ctx.precision @ r
        # (D' - kron(I_N, J) | 0)^T s without forming the block matrix
        g = np.zeros((N + 1, d))
        g[1:] += s.reshape(N, d)
        g[:N] -= s.reshape(N, d) @ J
        return 0.5 * float(r @ s), g
    r = flow_residual(ctx, x)
    s = ctx.precision @ r
    J = shift_drop_matrix(N, d) - gen_jacobian(ctx.model, x, "exact")
    return 0.5 * float(r @ s), (J.T @ s).reshape(N + 1, d)


def least_action_state(ctx: LagrangianContext, z) -> GenPoint:
    """Noise-free zigzag solution, the unique zero of the Lagrangian above ``z``."""
    N, d = ctx.order, ctx.model.state_dim
    return zigzag_solve(ctx.model, z, np.zeros((N, d)), ctx.mode)


def regularized_descent(
    ctx: LagrangianContext,
    z,
    lam: float,
    dt: float = 1e-3,
    T: float = 2.0,
    max_lambda_dt: float = MAX_LAMBDA_DT,
    bound: float = BLOWUP_BOUND,
):
    """Euler-integrate ``x' = D x - lam * grad L(x)`` from the least-action state.

    Returns ``(trajectory, lagrangian_trace)`` where the trajectory holds
    ``x^(0)`` at each step and the trace holds ``L(x_t)``.
    """
    if not lam >= 0:
        raise ValueError("lambda must be non-negative")
    if dt <= 0 or T < 0:
        raise StepSizeError("need dt > 0 and T >= 0")
    if lam * dt > max_lambda_dt:
        raise StepSizeError(f"lambda*dt = {lam * dt:g} exceeds the stability guard {max_lambda_dt:g}")
    n = int(round(T / dt)) + 1
    x = least_action_state(ctx, z)
    d = x.base_dim
    Dm = shift_matrix(x.order, d)
    v = x.flat()
    times = np.arange(n) * dt
    states = np.empty((n, d))
    trace = np.empty(n)
    blow = None
    with np.errstate(all="ignore"):
        for k in range(n):
            xk = GenPoint.from_flat(v, d) if k else x
            states[k] = v[:d]
            value, grad = _value_and_grad(ctx, xk)
            trace[k] = value
            if k == n - 1:
                break
            step = Dm @ v
            if lam:
                step = step - lam * grad.ravel()
            v = v + dt * step
            if not (np.all(np.isfinite(v)) and np.max(np.abs(v)) <= bound):
                blow = float(times[k + 1])
                n = k + 1
                break
    traj = Trajectory(times[:n], states[:n], "least_action", 0, blow)
    return traj, trace[:n]
