"""Hybrid unrolled ISTA solvers for sparse recovery."""

from .certified import certified_run
from .classical import ClassicalConfig, admm_lasso_run, fista_run, ista_run
from .core import ProblemInstance, SolverTrace, eval_objective, nmse_db
from .dictgen import GenSpec, make_problem
from .estimators import ClassicalLassoRecovery, HybridRecovery
from .hybrid import HybridConfig
from .models import UnrolledModel, build_model, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ClassicalConfig", "ClassicalLassoRecovery", "GenSpec", "HybridConfig", "HybridRecovery", "ProblemInstance",
    "SolverTrace", "UnrolledModel", "admm_lasso_run", "build_model", "certified_run", "count_parameters",
    "eval_objective", "fista_run", "ista_run", "make_problem", "nmse_db",
]
