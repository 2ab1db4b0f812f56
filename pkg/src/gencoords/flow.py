"""Flows and observation maps lifted to generalised coordinates.

The exact lift seeds every state component as a jet whose derivatives are the
generalised coordinates and pushes it through the flow's expression graph;
output derivative ``n`` is ``d^n/dt^n f(x_t)`` at ``t = 0``. The local linear
lift keeps only first derivatives of the flow:
``(f(x0), J(x0) x1, ..., J(x0) x_{N-1})``.

Jacobians are returned in order-major layout. The flow Jacobian has shape
(N*d, (N+1)*d) because the generalised flow ignores the top order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .core import GenPoint
from .errors import NoObservationModel, ShapeError, UnsupportedOperation
from .expr import Expr, evaluate, parse, var
from .jets import Jet, TangentJet

MODES = ("exact", "linear")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A flow ``f: R^d -> R^d`` and optional observation map ``g: R^d -> R^m``."""

    state_dim: int
    flow: tuple
    obs_map: tuple | None = None
    builtin: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        flow = tuple(parse(e) for e in self.flow)
        if len(flow) != self.state_dim:
            raise ShapeError(f"flow has {len(flow)} components, expected {self.state_dim}")
        obs = None if self.obs_map is None else tuple(parse(e) for e in self.obs_map)
        for e in flow + (obs or ()):
            bad = [i for i in e.variables() if i >= self.state_dim]
            if bad:
                raise UnsupportedOperation(f"expression references variables {bad} beyond d={self.state_dim}")
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "obs_map", obs)

    @property
    def obs_dim(self) -> int:
        return 0 if self.obs_map is None else len(self.obs_map)

    def with_obs_map(self, obs_map) -> "ModelSpec":
        return ModelSpec(self.state_dim, self.flow, obs_map, self.builtin, dict(self.params))

    def f(self, x) -> np.ndarray:
        """Evaluate the flow on ``x`` of shape (d,) or (d, *batch)."""
        if self.builtin == "linear":
            return np.tensordot(self._A, np.asarray(x, dtype=float), axes=1)
        return _eval_plain(self.flow, x)

    def f_and_jacobian(self, x):
        """``(f(x), J(x))`` from a single pass over the graph, for one point ``x``."""
        if self.builtin == "linear":
            return self.f(x), self.jacobian_f(x)
        return _value_and_jacobian(self.flow, x)

    def g_and_jacobian(self, x):
        return _value_and_jacobian(self._obs(), x)

    def linearisation(self, which: str, a0):
        """Cached ``(value, Jacobian)`` of ``f`` or ``g`` at one expansion point.

        Frozen-point energies evaluate many states against the same ``a0``;
        only the most recent point is kept per map.
        """
        a0 = np.asarray(a0, dtype=float)
        cache = self.__dict__.setdefault("_lin_cache", {})
        key = a0.tobytes()
        hit = cache.get(which)
        if hit is None or hit[0] != key:
            val, J = self.f_and_jacobian(a0) if which == "f" else self.g_and_jacobian(a0)
            hit = cache[which] = (key, np.asarray(val, dtype=float), np.asarray(J, dtype=float))
        return hit[1], hit[2]

    def g(self, x) -> np.ndarray:
        return _eval_plain(self._obs(), x)

    def jacobian_f(self, x) -> np.ndarray:
        """(d, d) Jacobian of ``f`` at ``x``; batched input (d, B) gives (B, d, d)."""
        if self.builtin == "linear":
            batch = np.shape(x)[1:]
            return np.broadcast_to(self._A, batch + self._A.shape).copy()
        return _plain_jacobian(self.flow, x)

    @property
    def _A(self) -> np.ndarray:
        return np.asarray(self.params["A"], dtype=float)

    def jacobian_g(self, x) -> np.ndarray:
        return _plain_jacobian(self._obs(), x)

    def _obs(self):
        if self.obs_map is None:
            raise NoObservationModel("model has no observation map")
        return self.obs_map


def _eval_plain(exprs, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    vals = evaluate(exprs, list(x))
    batch = x.shape[1:]
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), batch) for v in vals])


def _as_jet(v, K: int, batch_shape) -> Jet | TangentJet:
    if isinstance(v, (Jet, TangentJet)):
        return v
    return Jet.constant(np.broadcast_to(np.asarray(v, dtype=float), batch_shape), K)


def _plain_jacobian(exprs, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    batch = x.shape[1:]
    env = []
    for i in range(d):
        tan = np.zeros((1,) + batch + (d,))
        tan[..., i] = 1.0
        env.append(TangentJet(Jet(x[i][None]), tan))
    outs = evaluate(exprs, env)
    rows = []
    for v in outs:
        if isinstance(v, TangentJet):
            rows.append(np.broadcast_to(v.tan[0], batch + (d,)))
        else:
            rows.append(np.zeros(batch + (d,)))
    J = np.stack(rows, axis=-2)  # (*batch, out, d)
    return J


def _value_and_jacobian(exprs, x):
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    eye = np.eye(d)
    env = [TangentJet(Jet(x[i:i + 1]), eye[i][None]) for i in range(d)]
    val = np.empty(len(exprs))
    J = np.zeros((len(exprs), d))
    for j, v in enumerate(evaluate(exprs, env)):
        if isinstance(v, TangentJet):
            val[j] = v.val.c[0]
            J[j] = v.tan[0]
        else:
            val[j] = v
    return val, J


# ---------------------------------------------------------------------------
# builtin models


def linear(A, obs=None) -> ModelSpec:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d):
        raise ShapeError("A must be square")
    xs = [var(i) for i in range(d)]
    flow = []
    for i in range(d):
        terms = [float(A[i, j]) * xs[j] for j in range(d) if A[i, j] != 0.0]
        if not terms:
            flow.append(0.0 * xs[0])
        else:
            acc = terms[0]
            for t in terms[1:]:
                acc = acc + t
            flow.append(acc)
    return ModelSpec(d, tuple(flow), _obs_exprs(obs, d), "linear", {"A": A.tolist()})


def lotka_volterra(alpha=1.0, beta=1.0, gamma=1.0, delta=1.0, obs=None) -> ModelSpec:
    """Prey ``x0``, predator ``x1``: ``(alpha x0 - beta x0 x1, delta x0 x1 - gamma x1)``."""
    x, y = var(0), var(1)
    xy = x * y
    flow = (alpha * x - beta * xy, delta * xy - gamma * y)
    params = {"alpha": alpha, "beta": beta, "gamma": gamma, "delta": delta}
    return ModelSpec(2, flow, _obs_exprs(obs, 2), "lotka_volterra", params)


def lorenz(sigma=10.0, rho=28.0, beta=8.0 / 3.0, obs=None, time_scale=1.0) -> ModelSpec:
    """``(sigma (y - x), x (rho - z) - y, x y - beta z)``, multiplied by ``time_scale``.

    A ``time_scale`` below one slows the attractor down without changing its shape.
    """
    x, y, z = var(0), var(1), var(2)
    flow = (sigma * (y - x), x * (rho - z) - y, x * y - beta * z)
    if time_scale != 1.0:
        flow = tuple(float(time_scale) * e for e in flow)
    params = {"sigma": sigma, "rho": rho, "beta": beta, "time_scale": time_scale}
    return ModelSpec(3, flow, _obs_exprs(obs, 3), "lorenz", params)


def custom(flow, obs=None) -> ModelSpec:
    flow = tuple(parse(e) for e in flow)
    return ModelSpec(len(flow), flow, _obs_exprs(obs, len(flow)), "custom", {})


def _obs_exprs(obs, d: int):
    """Observation map from a keyword ('identity', 'sum'), a matrix, or expressions."""
    if obs is None:
        return None
    if isinstance(obs, str):
        xs = [var(i) for i in range(d)]
        if obs == "identity":
            return tuple(xs)
        if obs == "sum":
            acc = xs[0]
            for v in xs[1:]:
                acc = acc + v
            return (acc,)
        raise UnsupportedOperation(f"unknown observation keyword {obs!r}")
    if isinstance(obs, np.ndarray) or _is_matrix(obs):
        C = np.atleast_2d(np.asarray(obs, dtype=float))
        if C.shape[1] != d:
            raise ShapeError(f"observation matrix must have {d} columns")
        return linear_map(C)
    return tuple(parse(e) for e in obs)


def _is_matrix(obs) -> bool:
    # a list of numeric rows, as opposed to prefix expressions that start with an op name
    return (
        isinstance(obs, (list, tuple))
        and len(obs) > 0
        and all(isinstance(r, (list, tuple)) and r and all(isinstance(v, (int, float)) for v in r) for r in obs)
    )


def linear_map(C) -> tuple:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    xs = [var(j) for j in range(C.shape[1])]
    rows = []
    for i in range(C.shape[0]):
        terms = [float(C[i, j]) * xs[j] for j in range(C.shape[1]) if C[i, j] != 0.0]
        if not terms:
            rows.append(0.0 * xs[0])
            continue
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        rows.append(acc)
    return tuple(rows)


# ---------------------------------------------------------------------------
# lifting to generalised coordinates


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def lift_exact(exprs, coords) -> np.ndarray:
    """Serial derivatives of ``exprs(x_t)`` at 0 from ``coords`` (K+1, d, *batch).

    Returns (K+1, out, *batch); entry ``n`` depends on ``coords[:n+1]`` only.
    """
    coords = np.asarray(coords, dtype=float)
    K = coords.shape[0] - 1
    batch = coords.shape[2:]
    env = [Jet.from_derivatives(coords[:, i]) for i in range(coords.shape[1])]
    outs = [_as_jet(v, K, batch) for v in evaluate(exprs, env)]
    return np.stack([o.derivatives() for o in outs], axis=1)


def lift_exact_jacobian(exprs, coords, n_in_orders: int) -> np.ndarray:
    """Jacobian of :func:`lift_exact` (flattened order-major) w.r.t. ``coords``.

    ``coords`` has shape (K+1, d); the returned matrix has shape
    ((K+1)*out, n_in_orders*d), with zero columns for input orders above K.
    """
    coords = np.asarray(coords, dtype=float)
    K = coords.shape[0] - 1
    d = coords.shape[1]
    P = n_in_orders * d
    inv_fact = np.array([1.0 / factorial(k) for k in range(K + 1)])
    env = []
    for i in range(d):
        tan = np.zeros((K + 1, P))
        for k in range(K + 1):
            tan[k, k * d + i] = inv_fact[k]
        env.append(TangentJet(Jet(coords[:, i] * inv_fact), tan))
    outs = evaluate(exprs, env)
    m = len(outs)
    J = np.zeros(((K + 1) * m, P))
    fact = 1.0 / inv_fact
    for j, v in enumerate(outs):
        if isinstance(v, TangentJet):
            J[j::m] = v.tan * fact[:, None]
    return J


def gen_flow_exact(model: ModelSpec, x: GenPoint) -> np.ndarray:
    """``(f^(0)(x^(:0)), ..., f^(N-1)(x^(:N-1)))`` as an (N, d) array."""
    N = x.order
    if N < 1:
        raise ShapeError("generalised flow needs order N >= 1")
    return lift_exact(model.flow, x.coords[:N])


def gen_flow_linear(model: ModelSpec, x: GenPoint) -> np.ndarray:
    """Local linear lift ``(f(x0), J x1, ..., J x_{N-1})`` as an (N, d) array."""
    N = x.order
    if N < 1:
        raise ShapeError("generalised flow needs order N >= 1")
    c = x.coords
    out = np.empty((N, model.state_dim))
    out[0] = model.f(c[0])
    if N > 1:
        J = model.jacobian_f(c[0])
        out[1:] = c[1:N] @ J.T
    return out


def gen_flow(model: ModelSpec, x: GenPoint, mode: str) -> np.ndarray:
    _check_mode(mode)
    return gen_flow_exact(model, x) if mode == "exact" else gen_flow_linear(model, x)


def _linear_block_jacobian(J: np.ndarray, n_out: int, n_in: int) -> np.ndarray:
    # block (n, n) = J for n < n_out; zero elsewhere
    return np.kron(np.eye(n_out, n_in), J)


def gen_jacobian(model: ModelSpec, x: GenPoint, mode: str, method: str = "jet") -> np.ndarray:
    """Jacobian of the generalised flow, shape (N*d, (N+1)*d).

    Linear mode uses the block structure ``diag(J(x0), ..., J(x0)) | 0``.
    Exact mode differentiates :func:`gen_flow_exact` either through tangent
    jets (``method="jet"``) or by central differences (``method="fd"``).
    """
    _check_mode(mode)
    N, d = x.order, x.base_dim
    if mode == "linear":
        return _linear_block_jacobian(model.jacobian_f(x.coords[0]), N, N + 1)
    if method == "jet":
        return lift_exact_jacobian(model.flow, x.coords[:N], N + 1)
    if method == "fd":
        return _fd_jacobian(lambda v: gen_flow_exact(model, GenPoint.from_flat(v, d)).ravel(), x.flat())
    raise ValueError(f"unknown Jacobian method {method!r}")


def _fd_jacobian(fun, v: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        h = rel_step * (1.0 + abs(v[i]))
        vp, vm = v.copy(), v.copy()
        vp[i] += h
        vm[i] -= h
        cols.append((fun(vp) - fun(vm)) / (2 * h))
    return np.stack(cols, axis=1)


def gen_likelihood(model: ModelSpec, x: GenPoint, M: int, mode: str) -> np.ndarray:
    """Generalised observation map ``(g^(0), ..., g^(M))`` as an (M+1, m) array."""
    _check_mode(mode)
    obs = model._obs()
    if M > x.order or M < 0:
        raise ShapeError(f"observation order M={M} must lie in [0, {x.order}]")
    c = x.coords
    if mode == "exact":
        return lift_exact(obs, c[: M + 1])
    out = np.empty((M + 1, len(obs)))
    out[0] = model.g(c[0])
    if M >= 1:
        G = model.jacobian_g(c[0])
        out[1:] = c[1:M + 1] @ G.T
    return out


def gen_likelihood_jacobian(model: ModelSpec, x: GenPoint, M: int, mode: str) -> np.ndarray:
    """Jacobian of :func:`gen_likelihood`, shape ((M+1)*m, (N+1)*d)."""
    _check_mode(mode)
    obs = model._obs()
    N = x.order
    if mode == "linear":
        return _linear_block_jacobian(model.jacobian_g(x.coords[0]), M + 1, N + 1)
    return lift_exact_jacobian(obs, x.coords[: M + 1], N + 1)


def gen_flow_affine(model: ModelSpec, x: GenPoint, at: GenPoint) -> np.ndarray:
    """Local linear lift with the expansion point frozen at ``at``.

    ``(f(a0) + J(a0)(x0 - a0), J(a0) x1, ..., J(a0) x_{N-1})``. This is affine
    in ``x``, its Jacobian is the block matrix of :func:`gen_jacobian` in linear
    mode, and it reduces to :func:`gen_flow_linear` when ``at`` is ``x``.
    """
    N = x.order
    if N < 1:
        raise ShapeError("generalised flow needs order N >= 1")
    if at is x:
        return gen_flow_linear(model, x)
    a0 = at.coords[0]
    fa, J = model.linearisation("f", a0)
    c = x.coords
    out = np.empty((N, model.state_dim))
    out[0] = fa + J @ (c[0] - a0)
    out[1:] = c[1:N] @ J.T
    return out


def gen_likelihood_affine(model: ModelSpec, x: GenPoint, M: int, at: GenPoint) -> np.ndarray:
    """Observation counterpart of :func:`gen_flow_affine`, shape (M+1, m)."""
    if at is x:
        return gen_likelihood(model, x, M, "linear")
    obs = model._obs()
    if M > x.order or M < 0:
        raise ShapeError(f"observation order M={M} must lie in [0, {x.order}]")
    a0 = at.coords[0]
    ga, G = model.linearisation("g", a0)
    c = x.coords
    out = np.empty((M + 1, len(obs)))
    out[0] = ga + G @ (c[0] - a0)
    out[1:] = c[1:M + 1] @ G.T
    return out
