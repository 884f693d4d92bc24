import numpy as np
import pytest
from sklearn.base import clone

from ulz.errors import ArgumentError
from ulz.estimators import ClassicalLassoRecovery, HybridRecovery
from ulz.train import sample_dataset

from conftest import small_problem


@pytest.fixture
def data():
    A = small_problem(16, 32, seed=0).A
    d = sample_dataset(A, 200, p=0.1, seed=0)
    return A, d.B, d.X


class TestClassical:
    def test_params_and_clone(self, data):
        A = data[0]
        est = ClassicalLassoRecovery(A, solver="fista", lam=0.05)
        p = est.get_params()
        assert p["solver"] == "fista" and p["lam"] == 0.05
        c = clone(est)
        assert c.get_params()["n_iter"] == 100 and not hasattr(c, "A_")

    def test_predict_matches_solver(self, data):
        from ulz.classical import ClassicalConfig, ista_run
        from ulz.core import ProblemInstance
        A, B, X = data
        est = ClassicalLassoRecovery(A, n_iter=50).fit(B)
        out = est.predict(B[:3])
        for i in range(3):
            prob = ProblemInstance.from_signal(A, X[i] if np.any(X[i]) else np.eye(32)[0], b=B[i])
            np.testing.assert_array_equal(out[i], ista_run(prob, ClassicalConfig(K=50)).final)

    def test_score_is_negative_nmse(self, data):
        A, B, X = data
        X, B = X[np.any(X, axis=1)], B[np.any(X, axis=1)]
        assert ClassicalLassoRecovery(A, solver="fista", lam=0.01, n_iter=300).fit(B).score(B, X) > 5.0

    def test_validation(self, data):
        A, B, _ = data
        with pytest.raises(ArgumentError):
            ClassicalLassoRecovery(None).fit(B)
        with pytest.raises(ArgumentError):
            ClassicalLassoRecovery(A, solver="cd").fit(B)
        with pytest.raises(ArgumentError):
            ClassicalLassoRecovery(A).fit(B[:, :5])
        with pytest.raises(Exception):
            ClassicalLassoRecovery(A).predict(B)


class TestHybrid:
    def test_fit_predict(self, data):
        A, B, X = data
        est = HybridRecovery(A, K=2, steps_per_stage=5, batch_size=32, lr=5e-3)
        est.fit(B, X)
        assert est.predict(B[:4]).shape == (4, 32)
        assert len(est.train_log_) == 6
        assert np.isfinite(est.score(B[:20], X[:20]))

    def test_clone_keeps_params(self, data):
        est = HybridRecovery(data[0], variant="HCISTA", K=3, operator="zero")
        c = clone(est)
        assert c.get_params()["variant"] == "HCISTA" and c.get_params()["K"] == 3

    def test_validation(self, data):
        A, B, X = data
        with pytest.raises(ArgumentError):
            HybridRecovery(A, K=2, val_fraction=1.5).fit(B, X)
        with pytest.raises(ArgumentError):
            HybridRecovery(A, K=2, operator="mlp").fit(B, X)
        with pytest.raises(ArgumentError):
            HybridRecovery(A, K=2).fit(B, X[:, :10])

    def test_deterministic(self, data):
        A, B, X = data
        outs = [HybridRecovery(A, K=2, steps_per_stage=3, seed=4).fit(B, X).predict(B[:5]) for _ in range(2)]
        np.testing.assert_array_equal(outs[0], outs[1])
