"""Baseline Lasso solvers: ISTA, FISTA and scaled-form ADMM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import ProblemInstance, SolverTrace, eval_objective, soft_threshold, spectral_norm_sq
from .errors import ArgumentError, NumericError

LAMBDA_FLOOR = 1e-300


@dataclass(frozen=True)
class ClassicalConfig:
    lam: float = 0.1
    K: int = 100
    step: float | None = None
    rho: float = 1.0
    schedule: str = "fixed"  # or "adaptive"
    C_lambda: float = 1.0
    factor: float = 0.999

    def __post_init__(self):
        if self.lam < 0:
            raise ArgumentError("lambda must be nonnegative")
        if self.K < 1:
            raise ArgumentError("K must be at least 1")
        if self.rho <= 0:
            raise ArgumentError("rho must be positive")
        if self.schedule not in ("fixed", "adaptive"):
            raise ArgumentError(f"unknown lambda schedule {self.schedule!r}")


def _step(problem, cfg):
    L = spectral_norm_sq(problem.A)
    if cfg.step is None:
        return 1.0 / L
    if not 0 < cfg.step <= 1.0 / L * (1 + 1e-12):
        raise ArgumentError(f"step must lie in (0, 1/||A||^2 = {1 / L:.6g}]")
    return cfg.step


def next_lambda(lam_prev, x, x_prev, C_lambda, factor):
    """``factor * min(lam_prev, C * ||x - x_prev||)`` floored away from zero."""
    return max(factor * min(lam_prev, C_lambda * float(np.linalg.norm(x - x_prev))), LAMBDA_FLOOR)


def ista_run(problem: ProblemInstance, cfg: ClassicalConfig) -> SolverTrace:
    A, b = problem.A, problem.b
    t = _step(problem, cfg)
    x = np.zeros(A.shape[1])
    x_prev = x
    lam = cfg.lam
    trace = SolverTrace()
    trace.record(x, eval_objective(A, b, x, lam), problem.x_star, problem.support, lam=lam)
    for n in range(cfg.K):
        if cfg.schedule == "adaptive" and n > 0:
            lam = next_lambda(lam, x, x_prev, cfg.C_lambda, cfg.factor)
        x_prev = x
        x = soft_threshold(x - t * (A.T @ (A @ x - b)), lam * t)
        trace.record(x, eval_objective(A, b, x, lam), problem.x_star, problem.support, lam=lam)
    return trace


def fista_run(problem: ProblemInstance, cfg: ClassicalConfig) -> SolverTrace:
    A, b = problem.A, problem.b
    s = _step(problem, cfg)
    x = np.zeros(A.shape[1])
    y = x
    t = 1.0
    lam = cfg.lam
    trace = SolverTrace()
    trace.record(x, eval_objective(A, b, x, lam), problem.x_star, problem.support, lam=lam)
    for _ in range(cfg.K):
        x_new = soft_threshold(y - s * (A.T @ (A @ y - b)), lam * s)
        t_new = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        trace.record(x, eval_objective(A, b, x, lam), problem.x_star, problem.support, lam=lam)
    return trace


def admm_lasso_run(problem: ProblemInstance, cfg: ClassicalConfig) -> SolverTrace:
    A, b = problem.A, problem.b
    N = A.shape[1]
    rho, lam = cfg.rho, cfg.lam
    try:
        factor = cho_factor(A.T @ A + rho * np.eye(N))
    except LinAlgError as exc:
        raise NumericError(f"cannot factor A^T A + rho I: {exc}") from None
    Atb = A.T @ b
    x = np.zeros(N)
    z = np.zeros(N)
    u = np.zeros(N)
    trace = SolverTrace()
    trace.record(z, eval_objective(A, b, z, lam), problem.x_star, problem.support, primal_residual=0.0)
    for _ in range(cfg.K):
        x = cho_solve(factor, Atb + rho * (z - u))
        z = soft_threshold(x + u, lam / rho)
        u = u + x - z
        trace.record(z, eval_objective(A, b, z, lam), problem.x_star, problem.support,
                     primal_residual=float(np.linalg.norm(x - z)))
    return trace


SOLVERS = {"ista": ista_run, "fista": fista_run, "admm": admm_lasso_run}
