"""scikit-learn style wrappers.

Rows of ``X`` are measurements ``b`` and rows of ``y`` are the sparse signals,
so ``predict`` maps measurements to recovered codes for a fixed dictionary.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .classical import SOLVERS, ClassicalConfig
from .core import ProblemInstance, as_matrix
from .errors import ArgumentError
from .hybrid import HybridConfig
from .models import UnrolledModel
from .neuralop import ConvStackSpec
from .train import Dataset, TrainConfig, nmse_db_batch, predict, stagewise_train


def _dictionary(A):
    if A is None:
        raise ArgumentError("the estimator needs a dictionary")
    return as_matrix(A)


def _neg_nmse(X_hat, Y):
    return -nmse_db_batch(X_hat, Y)


class ClassicalLassoRecovery(RegressorMixin, BaseEstimator):
    """ISTA, FISTA or ADMM on each measurement row; nothing is learned."""

    def __init__(self, dictionary=None, solver="ista", lam=0.1, n_iter=100, schedule="fixed",
                 C_lambda=1.0, rho=1.0):
        self.dictionary = dictionary
        self.solver = solver
        self.lam = lam
        self.n_iter = n_iter
        self.schedule = schedule
        self.C_lambda = C_lambda
        self.rho = rho

    def fit(self, X, y=None):
        A = _dictionary(self.dictionary)
        if self.solver not in SOLVERS:
            raise ArgumentError(f"unknown solver {self.solver!r}")
        X = check_array(X)
        if X.shape[1] != A.shape[0]:
            raise ArgumentError(f"expected {A.shape[0]} measurement features, got {X.shape[1]}")
        self.A_ = A
        self.config_ = ClassicalConfig(lam=self.lam, K=self.n_iter, rho=self.rho, schedule=self.schedule,
                                       C_lambda=self.C_lambda)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "A_")
        X = check_array(X)
        run = SOLVERS[self.solver]
        N = self.A_.shape[1]
        out = np.empty((X.shape[0], N))
        # the signal is unknown here; a unit placeholder only feeds the unused trace metrics
        e0 = np.zeros(N)
        e0[0] = 1.0
        for i, b in enumerate(X):
            prob = ProblemInstance(self.A_, b, e0, np.zeros(1, dtype=np.int64))
            out[i] = run(prob, self.config_).final
        return out

    def score(self, X, y, sample_weight=None):
        """Negative NMSE in dB (higher is better)."""
        return _neg_nmse(self.predict(X), check_array(y))


class HybridRecovery(RegressorMixin, BaseEstimator):
    """Unrolled hybrid solver trained stage-wise on ``(measurements, signals)`` pairs."""

    def __init__(self, dictionary=None, variant="HLISTA_CP", K=8, lambda0=0.1, operator="conv",
                 lr=1e-3, steps_per_stage=50, batch_size=64, val_fraction=0.1, seed=0):
        self.dictionary = dictionary
        self.variant = variant
        self.K = K
        self.lambda0 = lambda0
        self.operator = operator
        self.lr = lr
        self.steps_per_stage = steps_per_stage
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed

    def _model(self, A):
        if self.operator not in ("conv", "zero"):
            raise ArgumentError(f"unknown operator {self.operator!r}")
        cfg = HybridConfig(self.variant, K=self.K, lambda0=self.lambda0, mode="trained", seed=self.seed)
        return UnrolledModel(cfg, A, ConvStackSpec() if self.operator == "conv" else None)

    def fit(self, X, y):
        A = _dictionary(self.dictionary)
        X, y = check_X_y(X, y, multi_output=True)
        if X.shape[1] != A.shape[0] or y.shape[1] != A.shape[1]:
            raise ArgumentError("X and y widths must match the dictionary shape")
        if not 0 < self.val_fraction < 1:
            raise ArgumentError("val_fraction must lie in (0, 1)")
        n_val = max(1, int(round(self.val_fraction * X.shape[0])))
        if n_val >= X.shape[0]:
            raise ArgumentError("need more samples than the validation split")
        train = Dataset(y[n_val:], X[n_val:])
        val = Dataset(y[:n_val], X[:n_val])
        model = self._model(A)
        tcfg = TrainConfig(K=self.K, lr=self.lr, steps_per_stage=self.steps_per_stage,
                           batch_size=self.batch_size, train_size=len(train), val_size=n_val, seed=self.seed)
        result = stagewise_train(model, train, val, tcfg)
        self.model_ = model
        self.train_log_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_array(X))

    def score(self, X, y, sample_weight=None):
        """Negative NMSE in dB (higher is better)."""
        return _neg_nmse(self.predict(X), check_array(y))


__all__ = ["ClassicalLassoRecovery", "HybridRecovery"]
