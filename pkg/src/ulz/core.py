"""Lasso objective, thresholding operators and recovery metrics.

Dense vectors and matrices are plain float64 numpy arrays. The helpers
``as_vector`` and ``as_matrix`` validate inputs at the library boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, ConvergenceError

NEG_INF = -math.inf


def as_vector(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ArgumentError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} has non-finite entries")
    return arr


def as_matrix(a, name="A"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} has non-finite entries")
    return arr


def support_of(x, tol=0.0):
    """Sorted indices of the entries of ``x`` with magnitude above ``tol``."""
    return np.flatnonzero(np.abs(np.asarray(x)) > tol)


@dataclass(frozen=True)
class ProblemInstance:
    """A sparse recovery instance ``b = A x* (+ noise)``."""

    A: np.ndarray
    b: np.ndarray
    x_star: np.ndarray
    support: np.ndarray
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        A = as_matrix(self.A)
        b = as_vector(self.b, "b")
        x = as_vector(self.x_star, "x_star")
        M, N = A.shape
        if M > N:
            raise ArgumentError(f"expected M <= N, got {M} x {N}")
        if b.shape != (M,) or x.shape != (N,):
            raise ArgumentError("b or x_star does not match the dictionary shape")
        support = np.asarray(self.support, dtype=np.int64)
        if not np.array_equal(support, support_of(x)):
            raise ArgumentError("support must equal the nonzero indices of x_star")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "x_star", x)
        object.__setattr__(self, "support", support)

    @property
    def shape(self):
        return self.A.shape

    @classmethod
    def from_signal(cls, A, x_star, b=None, snr_db=None, seed=0):
        A = as_matrix(A)
        x_star = as_vector(x_star, "x_star")
        if b is None:
            b = A @ x_star
        return cls(A, b, x_star, support_of(x_star), snr_db, seed)


@dataclass
class SolverTrace:
    """Per-iteration record; index 0 is the initialization."""

    iterates: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    nmse_db: list = field(default_factory=list)
    support_true_frac: list = field(default_factory=list)
    support_false_frac: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def record(self, x, objective, x_star=None, support=None, **diag):
        x = np.array(x, dtype=np.float64, copy=True)
        self.iterates.append(x)
        self.objective.append(float(objective))
        if x_star is not None:
            self.nmse_db.append(nmse_db(x, x_star))
            sm = support_metrics(x, support if support is not None else support_of(x_star))
            self.support_true_frac.append(sm.true_frac)
            self.support_false_frac.append(sm.false_frac)
        self.diagnostics.append(dict(diag))

    def __len__(self):
        return len(self.iterates)

    @property
    def final(self):
        return self.iterates[-1]

    def column(self, key):
        """Diagnostic values for ``key`` (None where absent)."""
        return [d.get(key) for d in self.diagnostics]


def eval_objective(A, b, x, lam):
    """Lasso objective ``0.5 ||Ax - b||^2 + lam ||x||_1``."""
    A = as_matrix(A)
    b = as_vector(b, "b")
    x = as_vector(x, "x")
    if A.shape != (b.size, x.size):
        raise ArgumentError(f"dimension mismatch: A {A.shape}, b {b.shape}, x {x.shape}")
    if lam < 0:
        raise ArgumentError("lambda must be nonnegative")
    r = A @ x - b
    return 0.5 * float(r @ r) + lam * float(np.abs(x).sum())


def soft_threshold(z, theta):
    """Elementwise ``sgn(z) max(|z| - theta, 0)``."""
    if theta < 0:
        raise ArgumentError(f"threshold must be nonnegative, got {theta}")
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - theta, 0.0)


def top_k_mask(z, keep_count):
    """Boolean mask of the ``keep_count`` largest magnitudes along the last axis.

    Ties go to the lower index.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[-1]
    if not 0 <= keep_count <= n:
        raise ArgumentError(f"keep_count must lie in [0, {n}], got {keep_count}")
    mask = np.zeros(z.shape, dtype=bool)
    if keep_count == 0:
        return mask
    order = np.argsort(-np.abs(z), axis=-1, kind="stable")[..., :keep_count]
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def ss_threshold(z, theta, keep_count):
    """Soft threshold that lets the top ``keep_count`` magnitudes pass unchanged.

    Selected entries still vanish when ``|z_i| <= theta``.
    """
    if theta < 0:
        raise ArgumentError(f"threshold must be nonnegative, got {theta}")
    z = np.asarray(z, dtype=np.float64)
    keep = top_k_mask(z, keep_count) & (np.abs(z) > theta)
    return np.where(keep, z, soft_threshold(z, theta))


def multistage_threshold(z, theta, theta_hat):
    """Three-piece shrinkage: zero, stretched linear, identity."""
    if theta < 0 or not theta_hat > theta:
        raise ArgumentError(f"need 0 <= theta < theta_hat, got {theta}, {theta_hat}")
    z = np.asarray(z, dtype=np.float64)
    mag = np.abs(z)
    mid = (theta_hat / (theta_hat - theta)) * np.sign(z) * (mag - theta)
    return np.where(mag < theta, 0.0, np.where(mag < theta_hat, mid, z))


def spectral_norm_sq(A, tol=1e-13, max_iter=20000, seed=0):
    """Largest eigenvalue of ``A^T A`` by power iteration.

    Stops once the Rayleigh quotient changes by less than ``tol`` relatively.
    """
    A = as_matrix(A)
    if not np.any(A):
        raise ArgumentError("spectral norm of the zero matrix is not defined here")
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            # start vector in the null space; restart along a coordinate
            v = np.zeros_like(v)
            v[np.argmax(np.linalg.norm(A, axis=0))] = 1.0
            continue
        v = w / nrm
        if est > 0 and abs(new - est) <= tol * new:
            return max(new, float(v @ (A.T @ (A @ v))))
        est = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps", est)


def nmse_db(x, x_star):
    """``10 log10(||x - x*||^2 / ||x*||^2)``; exact recovery gives ``-inf``."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    ref = float(x_star @ x_star)
    if ref == 0.0:
        raise ArgumentError("x_star must be nonzero")
    err = float((x - x_star) @ (x - x_star))
    if err == 0.0:
        return NEG_INF
    return 10.0 * math.log10(err / ref)


class SupportMetrics(NamedTuple):
    true_frac: float
    false_frac: float
    empty: bool = False


def support_metrics(x, support):
    """Energy fractions of ``x`` on and off ``support``."""
    x = np.asarray(x, dtype=np.float64)
    total = float(x @ x)
    if total == 0.0:
        return SupportMetrics(0.0, 0.0, True)
    on = np.zeros(x.shape, dtype=bool)
    on[np.asarray(support, dtype=np.int64)] = True
    e_on = float(x[on] @ x[on])
    e_off = float(x[~on] @ x[~on])
    s = e_on + e_off
    return SupportMetrics(e_on / s, e_off / s, False)
