"""Synthetic problem generation, coupled weights and mutual coherence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, hadamard, lapack

from .core import ProblemInstance, as_matrix, as_vector, support_of
from .errors import ArgumentError, NumericError
from .rng import stream


@dataclass(frozen=True)
class GenSpec:
    M: int
    N: int
    bernoulli_p: float = 0.1
    condition_number: float | None = None
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ArgumentError("M and N must be positive")
        if self.M > self.N:
            raise ArgumentError(f"expected M <= N, got M={self.M}, N={self.N}")
        if not 0.0 < self.bernoulli_p <= 1.0:
            raise ArgumentError(f"bernoulli_p must lie in (0, 1], got {self.bernoulli_p}")
        if self.condition_number is not None and self.condition_number < 1.0:
            raise ArgumentError("condition_number must be >= 1")


@dataclass(frozen=True)
class DictionaryInfo:
    raw: np.ndarray
    raw_condition: float | None
    achieved_condition: float


@dataclass(frozen=True)
class CoherenceReport:
    W: np.ndarray
    mu_hat: float
    diag_max_dev: float


def _normalize_columns(A):
    return A / np.linalg.norm(A, axis=0, keepdims=True)


def make_dictionary(spec: GenSpec):
    """Dictionary plus construction details (raw factor, condition numbers)."""
    rng = stream(spec.seed, "dictionary")
    A = rng.normal(0.0, 1.0 / math.sqrt(spec.M), size=(spec.M, spec.N))
    raw_cond = None
    if spec.condition_number is not None:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        k = s.size
        ratios = np.linspace(0.0, 1.0, k) if k > 1 else np.zeros(1)
        s_new = s[0] * spec.condition_number ** (-ratios)
        A = (U * s_new) @ Vt
        raw_cond = float(s_new[0] / s_new[-1])
    raw = A.copy()
    A = _normalize_columns(A)
    s = np.linalg.svd(A, compute_uv=False)
    return A, DictionaryInfo(raw, raw_cond, float(s[0] / s[-1]))


def generate_dictionary(spec: GenSpec):
    """Gaussian ``N(0, 1/M)`` dictionary with unit-norm columns."""
    return make_dictionary(spec)[0]


def identity_hadamard_dictionary(M):
    """``[I, H/sqrt(M)]``: an ``M x 2M`` union of two orthobases.

    Its coherence is ``1/sqrt(M)`` and ``A A^T = 2 I``.
    """
    if M < 1 or M & (M - 1):
        raise ArgumentError(f"M must be a power of two, got {M}")
    return np.hstack([np.eye(M), hadamard(M).astype(np.float64) / math.sqrt(M)])


def sample_signal(N, p, seed):
    """Bernoulli-Gaussian signal, redrawn until it has at least two nonzeros.

    Returns ``(x, support, redraws)``.
    """
    if not 0.0 < p <= 1.0:
        raise ArgumentError(f"p must lie in (0, 1], got {p}")
    if N < 2:
        raise ArgumentError("N must be at least 2")
    rng = stream(seed, "signal")
    redraws = 0
    while True:
        mask = rng.random(N) < p
        x = np.where(mask, rng.standard_normal(N), 0.0)
        if np.count_nonzero(x) >= 2:
            return x, support_of(x), redraws
        redraws += 1


def sample_signal_k(N, k, seed):
    """Signal with exactly ``k`` Gaussian nonzeros at uniform positions."""
    if not 1 <= k <= N:
        raise ArgumentError(f"k must lie in [1, {N}]")
    rng = stream(seed, "signal")
    idx = np.sort(rng.choice(N, size=k, replace=False))
    x = np.zeros(N)
    vals = rng.standard_normal(k)
    vals[vals == 0.0] = 1.0
    x[idx] = vals
    return x, idx


def add_noise(b, snr_db, seed):
    """Add Gaussian noise scaled to hit ``snr_db`` exactly."""
    b = as_vector(b, "b")
    if snr_db is None or snr_db == math.inf:
        return b.copy()
    energy = float(b @ b)
    if energy == 0.0:
        raise ArgumentError("cannot set an SNR relative to a zero measurement")
    n = stream(seed, "noise").standard_normal(b.size)
    n *= math.sqrt(energy * 10.0 ** (-snr_db / 10.0) / float(n @ n))
    return b + n


def make_problem(spec: GenSpec):
    """Full instance for ``spec``; also returns construction metadata."""
    A, info = make_dictionary(spec)
    x, _, redraws = sample_signal(spec.N, spec.bernoulli_p, spec.seed)
    b = add_noise(A @ x, spec.snr_db, spec.seed)
    meta = {
        "M": spec.M,
        "N": spec.N,
        "seed": spec.seed,
        "snr_db": "" if spec.snr_db is None else spec.snr_db,
        "kappa": "" if spec.condition_number is None else spec.condition_number,
        "kappa_achieved": info.achieved_condition,
        "p": spec.bernoulli_p,
        "resample_rule": "redraw_if_support_lt_2",
        "redraws": redraws,
    }
    return ProblemInstance.from_signal(A, x, b, spec.snr_db, spec.seed), meta


def analytic_W(A):
    """Closed-form minimizer of ``||W^T A||_F`` subject to ``W_i^T A_i = 1``."""
    A = as_matrix(A)
    G = A @ A.T
    c, info = lapack.dpotrf(G, lower=True, clean=True)
    if info > 0:
        raise NumericError(f"A A^T is singular: Cholesky pivot {info} is not positive")
    if info < 0:
        raise NumericError(f"Cholesky argument {-info} is invalid")
    Z = cho_solve((c, True), A)
    scale = np.einsum("ij,ij->j", A, Z)
    W = Z / scale
    return CoherenceReport(W, coherence(A, W), float(np.max(np.abs(np.einsum("ij,ij->j", W, A) - 1.0))))


def coherence(A, W):
    """``max_{i != j} |W_i^T A_j|`` for the given ``W``."""
    A = as_matrix(A)
    W = as_matrix(W, "W")
    if A.shape != W.shape:
        raise ArgumentError(f"shape mismatch: A {A.shape}, W {W.shape}")
    G = np.abs(W.T @ A)
    np.fill_diagonal(G, 0.0)
    return float(G.max()) if G.size > 1 else 0.0
