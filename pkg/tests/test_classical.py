import numpy as np
import pytest

from ulz.classical import ClassicalConfig, admm_lasso_run, fista_run, ista_run, next_lambda
from ulz.core import ProblemInstance, nmse_db, spectral_norm_sq
from ulz.errors import ArgumentError

from conftest import small_problem
from oracles import coordinate_descent_lasso

SCALAR = ProblemInstance(np.array([[1.0]]), np.array([1.0]), np.array([1.0]), np.array([0]))


def sublinear_quadratic(n=500):
    """Diagonal least squares whose low spectrum is dense enough to show the worst-case rates."""
    j = np.arange(1, n + 1)
    s = 2.0 * np.sin(j * np.pi / (2 * (n + 1)))
    s[-1] = 2.5  # isolate the top singular value so power iteration settles
    b = np.sqrt(j / n**2)
    return ProblemInstance(np.diag(s), b, b / s, j - 1)


def overdetermined_ls(seed=0):
    # square full-rank system padded so the least-squares solution is nontrivial
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((8, 8))
    b = rng.standard_normal(8)
    x = np.linalg.solve(A.T @ A, A.T @ b)
    return ProblemInstance(A, b, x, np.arange(8)), x


class TestConfig:
    def test_rejects(self):
        with pytest.raises(ArgumentError):
            ClassicalConfig(lam=-1)
        with pytest.raises(ArgumentError):
            ClassicalConfig(K=0)
        with pytest.raises(ArgumentError):
            ClassicalConfig(rho=0)
        with pytest.raises(ArgumentError):
            ClassicalConfig(schedule="cosine")

    def test_step_above_bound(self, problem):
        L = spectral_norm_sq(problem.A)
        with pytest.raises(ArgumentError):
            ista_run(problem, ClassicalConfig(step=1.5 / L))

    def test_next_lambda(self):
        x, xp = np.array([0.3, 0.0]), np.array([0.0, 0.4])
        assert next_lambda(0.2, x, xp, 1.0, 0.999) == pytest.approx(0.999 * 0.2)
        assert next_lambda(0.9, x, xp, 1.0, 0.999) == pytest.approx(0.999 * 0.5)
        assert next_lambda(0.9, x, x, 1.0, 0.999) > 0


class TestScalarFixedPoint:
    def test_ista_one_step(self):
        tr = ista_run(SCALAR, ClassicalConfig(lam=0.5, K=1, step=1.0))
        assert tr.iterates[1][0] == 0.5

    def test_fista(self):
        tr = fista_run(SCALAR, ClassicalConfig(lam=0.5, K=5, step=1.0))
        np.testing.assert_allclose(np.array(tr.iterates[1:])[:, 0], 0.5, rtol=0, atol=1e-15)

    def test_admm(self):
        tr = admm_lasso_run(SCALAR, ClassicalConfig(lam=0.5, K=200, rho=1.0))
        assert abs(tr.final[0] - 0.5) < 1e-8


class TestLeastSquares:
    def test_ista_and_fista(self):
        prob, x = overdetermined_ls()
        for run in (ista_run, fista_run):
            tr = run(prob, ClassicalConfig(lam=0.0, K=20000))
            np.testing.assert_allclose(tr.final, x, atol=1e-6)

    def test_admm(self):
        prob, x = overdetermined_ls(1)
        tr = admm_lasso_run(prob, ClassicalConfig(lam=0.0, K=2000))
        np.testing.assert_allclose(tr.final, x, atol=1e-6)


class TestIsta:
    def test_monotone(self):
        prob = small_problem(20, 40, p=3 / 40, seed=5)
        F = np.array(ista_run(prob, ClassicalConfig(lam=0.1, K=300)).objective)
        assert np.all(np.diff(F) <= 1e-12)

    def test_trace_length(self, problem):
        tr = ista_run(problem, ClassicalConfig(K=16))
        assert len(tr) == 17 and len(tr.nmse_db) == 17
        assert not np.any(tr.iterates[0])

    def test_adaptive_lambda_nonincreasing(self, problem):
        tr = ista_run(problem, ClassicalConfig(K=50, schedule="adaptive", C_lambda=1.0))
        lams = tr.column("lam")
        assert all(b <= a for a, b in zip(lams, lams[1:]))


class TestFista:
    def test_dominates_ista(self):
        for seed in range(20):
            prob = small_problem(seed=seed)
            cfg = ClassicalConfig(lam=0.1, K=100)
            assert fista_run(prob, cfg).objective[-1] <= ista_run(prob, cfg).objective[-1] + 1e-12

    def test_quadratic_rate(self):
        prob = sublinear_quadratic()
        ks = np.arange(20, 401)
        F = np.array(fista_run(prob, ClassicalConfig(lam=0.0, K=400)).objective)
        slope = np.polyfit(np.log(ks), np.log(F[ks]), 1)[0]
        assert abs(slope + 2.0) <= 0.3
        F = np.array(ista_run(prob, ClassicalConfig(lam=0.0, K=400)).objective)
        assert abs(np.polyfit(np.log(ks), np.log(F[ks]), 1)[0] + 1.0) <= 0.3


class TestAdmm:
    def test_residual_trend(self):
        prob = small_problem(seed=3)
        r = np.array(admm_lasso_run(prob, ClassicalConfig(lam=0.1, K=300)).column("primal_residual")[1:])
        live = r[r > 1e-12]  # below this only rounding noise remains
        assert live.size > 50
        assert np.mean(np.diff(live) > 0) <= 0.05
        slope = np.polyfit(np.arange(r.size), np.log(np.maximum(r, 1e-300)), 1)[0]
        assert slope < 0


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", range(20))
    def test_all_solvers(self, seed):
        prob = small_problem(5, 8, p=0.3, seed=seed)
        lam = 0.05
        ref = coordinate_descent_lasso(prob.A, prob.b, lam)
        if not np.any(ref):
            pytest.skip("oracle solution is zero")
        for run, K in ((ista_run, 20000), (fista_run, 5000), (admm_lasso_run, 5000)):
            x = run(prob, ClassicalConfig(lam=lam, K=K)).final
            assert nmse_db(x, ref) <= -80.0, run.__name__
