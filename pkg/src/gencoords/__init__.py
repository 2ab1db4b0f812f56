"""Stochastic dynamics in generalised coordinates: simulation, least action and filtering."""

from .core import GenNoise, GenPoint, exp_shift_matrix, shift, shift_drop, taylor_eval
from .filtering import (
    FilterState,
    GenerativeModel,
    GenObservation,
    embed_finite_diff,
    embed_inverse_taylor,
    energy,
    energy_grad,
    energy_hessian,
    laplace_free_energy,
    logdet_grad,
    optimal_cov,
    run_filter,
    select_order,
)
from .flow import ModelSpec, gen_flow_exact, gen_flow_linear, gen_jacobian, gen_likelihood
from .integrators import Trajectory, euler_baseline, zigzag_solve, zigzag_trajectory
from .least_action import LagrangianContext, lagrangian, lagrangian_grad, regularized_descent
from .linear import LinearModel, convergence_radius, gaussian_pushforward, linear_cov, linear_mean
from .noise import GenCov, KernelSpec, build_gen_cov, first_zero_crossing, sample_gen_noise

__version__ = "0.1.0"
