import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ulz.core import (ProblemInstance, SolverTrace, eval_objective, multistage_threshold, nmse_db,
                      soft_threshold, spectral_norm_sq, ss_threshold, support_metrics, top_k_mask)
from ulz.errors import ArgumentError

from oracles import jacobi_eigenvalues

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, st.integers(1, 12), elements=finite)


def exact_objective(A, b, x, lam):
    # rational arithmetic: every double is an exact fraction
    A = [[Fraction(v) for v in row] for row in A]
    r = [sum(a * Fraction(xi) for a, xi in zip(row, x)) - Fraction(bi) for row, bi in zip(A, b)]
    return Fraction(1, 2) * sum(v * v for v in r) + Fraction(lam) * sum(abs(Fraction(v)) for v in x)


class TestObjective:
    def test_zero_iterate(self):
        assert eval_objective(np.eye(2), [1.0, 0.0], [0.0, 0.0], 1.0) == 0.5

    def test_exact_fit(self):
        assert eval_objective(np.eye(2), [1.0, 0.0], [1.0, 0.0], 1.0) == 1.0

    def test_matches_rational_oracle(self, rng):
        for _ in range(5):
            A = rng.standard_normal((5, 8))
            b = rng.standard_normal(5)
            x = rng.standard_normal(8) * (rng.random(8) < 0.5)
            ref = float(exact_objective(A, b, x, 0.3))
            assert abs(eval_objective(A, b, x, 0.3) - ref) <= 1e-12 * max(1.0, abs(ref))

    def test_rejects_negative_lambda(self):
        with pytest.raises(ArgumentError):
            eval_objective(np.eye(2), [1.0, 0.0], [0.0, 0.0], -1.0)


class TestThresholds:
    def test_soft_cases(self):
        np.testing.assert_array_equal(soft_threshold(np.array([2.5, -0.3, 0.0]), 1.0), [1.5, 0.0, 0.0])
        np.testing.assert_array_equal(soft_threshold(np.array([-4.0]), 1.5), [-2.5])

    def test_soft_zero_threshold(self, rng):
        z = rng.standard_normal(7)
        np.testing.assert_array_equal(soft_threshold(z, 0.0), z)

    def test_ss_cases(self):
        np.testing.assert_array_equal(ss_threshold(np.array([3.0, -2.0, 0.5]), 1.0, 1), [3.0, -1.0, 0.0])

    def test_ss_full_selection(self, rng):
        # selected entries above the threshold pass; entries inside [-theta, theta] still vanish
        z = rng.standard_normal(6)
        np.testing.assert_array_equal(ss_threshold(z, 0.4, 6), np.where(np.abs(z) > 0.4, z, 0.0))
        z = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(ss_threshold(z, 0.25, 3), z)

    def test_multistage_branches(self):
        out = multistage_threshold(np.array([0.5, 1.5, 3.0, -1.5]), 1.0, 2.0)
        np.testing.assert_allclose(out, [0.0, 1.0, 3.0, -1.0], rtol=0, atol=1e-15)

    def test_multistage_needs_ordered_thresholds(self):
        with pytest.raises(ArgumentError):
            multistage_threshold(np.ones(2), 1.0, 1.0)

    def test_top_k_mask_count(self, rng):
        z = rng.standard_normal(10)
        m = top_k_mask(z, 3)
        assert m.sum() == 3
        assert np.abs(z[m]).min() >= np.abs(z[~m]).max()

    @given(vec, st.floats(0, 10))
    def test_soft_is_prox_of_l1(self, z, theta):
        # optimality: 0 in y - z + theta * sign(y)
        y = soft_threshold(z, theta)
        nz = y != 0
        np.testing.assert_allclose((z - y)[nz], theta * np.sign(y[nz]), atol=1e-9)
        assert np.all(np.abs(z[~nz]) <= theta + 1e-12)

    @given(vec, st.floats(0, 10), st.randoms())
    def test_soft_nonexpansive(self, z, theta, r):
        w = z + np.array([r.uniform(-5, 5) for _ in z])
        d = np.linalg.norm(soft_threshold(z, theta) - soft_threshold(w, theta))
        assert d <= np.linalg.norm(z - w) * (1 + 1e-12) + 1e-12

    @given(vec, st.floats(0, 10))
    def test_ss_keep_zero_is_soft(self, z, theta):
        np.testing.assert_array_equal(ss_threshold(z, theta, 0), soft_threshold(z, theta))

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-10, 10)), st.floats(0.01, 1))
    def test_multistage_tends_to_soft(self, u, theta):
        # the middle branch exceeds the soft value by (|z| - theta) theta / (theta_hat - theta)
        z = u * theta
        gap = multistage_threshold(z, theta, 1e6 * theta) - soft_threshold(z, theta)
        bound = np.maximum(np.abs(z) - theta, 0.0) / (1e6 - 1) * (1 + 1e-9) + 1e-15
        assert np.all(np.abs(gap) <= bound)
        assert np.all(np.abs(gap) <= 1e-5 * theta)


class TestSpectralNorm:
    def test_identity(self):
        assert abs(spectral_norm_sq(np.eye(3)) - 1.0) < 1e-12

    def test_diagonal(self):
        assert abs(spectral_norm_sq(np.diag([2.0, 1.0])) - 4.0) < 1e-10

    def test_matches_jacobi_oracle(self, rng):
        for _ in range(3):
            A = rng.standard_normal((5, 4))
            ref = jacobi_eigenvalues(A.T @ A)[-1]
            assert abs(spectral_norm_sq(A) - ref) <= 1e-9 * ref

    def test_rayleigh_lower_bound(self, rng):
        A = rng.standard_normal((12, 20))
        L = spectral_norm_sq(A)
        for _ in range(100):
            v = rng.standard_normal(20)
            assert L >= (np.linalg.norm(A @ v) / np.linalg.norm(v)) ** 2 * (1 - 1e-12)


class TestMetrics:
    def test_exact_recovery(self):
        assert nmse_db(np.ones(3), np.ones(3)) == -math.inf

    def test_ten_percent(self):
        x = np.array([1.0, 0.0])
        assert abs(nmse_db(x + [math.sqrt(0.1), 0.0], x) + 10.0) < 1e-12

    def test_zero_estimate(self):
        assert nmse_db(np.zeros(3), np.array([1.0, 2.0, 0.0])) == 0.0

    def test_zero_reference_rejected(self):
        with pytest.raises(ArgumentError):
            nmse_db(np.ones(2), np.zeros(2))

    def test_support_fractions(self):
        assert support_metrics(np.array([1.0, 0.0]), [0])[:2] == (1.0, 0.0)
        assert support_metrics(np.array([0.0, 2.0]), [0])[:2] == (0.0, 1.0)
        assert support_metrics(np.array([1.0, 1.0]), [0])[:2] == (0.5, 0.5)

    @given(arrays(np.float64, 6, elements=finite), st.sets(st.integers(0, 5)))
    def test_fractions_sum_to_one(self, x, S):
        m = support_metrics(x, sorted(S))
        if np.linalg.norm(x) > 0:
            assert abs(m.true_frac + m.false_frac - 1.0) < 1e-12


class TestProblemInstance:
    def test_support_must_match(self):
        with pytest.raises(ArgumentError):
            ProblemInstance(np.eye(2), np.ones(2), np.array([1.0, 0.0]), np.array([1]))

    def test_wide_only(self):
        with pytest.raises(ArgumentError):
            ProblemInstance.from_signal(np.ones((3, 2)), np.ones(2))

    def test_rejects_nan(self):
        with pytest.raises(ArgumentError):
            ProblemInstance.from_signal(np.array([[1.0, np.nan]]), np.ones(2))

    def test_trace_records_metrics(self):
        tr = SolverTrace()
        tr.record(np.array([1.0, 0.0]), 0.5, np.array([1.0, 0.0]), alpha=0.7)
        assert tr.nmse_db == [-math.inf]
        assert tr.column("alpha") == [0.7]
        assert len(tr) == 1
