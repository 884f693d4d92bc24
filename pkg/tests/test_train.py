import math

import numpy as np
import pytest

from ulz.autodiff import Tape, adam_step
from ulz.errors import ArgumentError, TrainingError
from ulz.models import build_model
from ulz.neuralop import ConvStackSpec
from ulz.train import (
    LOG_COLUMNS, Dataset, Stage, TrainConfig, evaluate, mse_loss, nmse_db_batch, predict, sample_dataset,
    stagewise_train,
)

from conftest import small_problem
from oracles import central_difference

SMALL_SPEC = ConvStackSpec(layers=((3, 1, 2), (3, 2, 2), (3, 2, 1)))


def setup(variant="HLISTA_CP", K=4, M=32, N=64, spec=SMALL_SPEC, seed=0):
    A = small_problem(M, N, seed=seed).A
    model = build_model(variant, A, K=K, op_spec=spec, seed=seed)
    train = sample_dataset(A, 300, seed=seed, index=0)
    val = sample_dataset(A, 60, seed=seed, index=1)
    return model, train, val


class TestLoss:
    def test_value(self):
        T = Tape()
        x = T.const(np.array([[1.0, 2.0], [0.0, 0.0]]))
        out = T.value(mse_loss(T, x, np.array([[0.0, 2.0], [0.0, 3.0]])))
        assert out == pytest.approx((1.0 + 9.0) / 2)

    def test_gradient(self, rng):
        X = rng.standard_normal((3, 5))
        Y = rng.standard_normal((3, 5))
        T = Tape()
        leaf = T.leaf("x", X)
        g = T.backward(mse_loss(T, leaf, Y))["x"]
        fd = central_difference(lambda z: float(np.sum((z - Y) ** 2) / 3), X)
        np.testing.assert_allclose(g, fd, atol=1e-7)

    def test_shape_mismatch(self):
        T = Tape()
        with pytest.raises(ArgumentError):
            mse_loss(T, T.const(np.zeros((2, 3))), np.zeros((2, 4)))

    def test_nmse_batch(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert nmse_db_batch(X, X) == -math.inf
        assert nmse_db_batch(0.9 * X, X) == pytest.approx(20.0 * math.log10(0.1))
        with pytest.raises(ArgumentError):
            nmse_db_batch(X, np.zeros((2, 2)))


class TestConfig:
    def test_default_schedule(self):
        stages = TrainConfig(K=3, lr=1e-3).schedule()
        assert len(stages) == 9
        assert stages[0] == Stage((0,), 1e-3, 50)
        assert stages[4].layers == (0, 1) and stages[4].lr == pytest.approx(2e-4)
        assert stages[-1].layers == (0, 1, 2) and stages[-1].lr == pytest.approx(2e-5)

    def test_rejects(self):
        with pytest.raises(ArgumentError):
            TrainConfig(K=0)
        with pytest.raises(ArgumentError):
            TrainConfig(K=2, stages=(Stage((2,), 1e-3, 1),))
        with pytest.raises(ArgumentError):
            Stage((0,), 0.0, 1)
        with pytest.raises(ArgumentError):
            Stage((0,), 1e-3, -1)

    def test_dataset_rows(self):
        with pytest.raises(ArgumentError):
            Dataset(np.zeros((3, 4)), np.zeros((2, 2)))


class TestSampling:
    def test_deterministic(self):
        A = small_problem().A
        a, b = sample_dataset(A, 50, seed=3), sample_dataset(A, 50, seed=3)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.B, a.X @ A.T)
        assert not np.array_equal(a.X, sample_dataset(A, 50, seed=3, index=1).X)

    def test_density(self):
        d = sample_dataset(small_problem().A, 2000, p=0.1, seed=0)
        assert abs(np.mean(d.X != 0) - 0.1) < 0.01

    def test_noise(self):
        A = small_problem().A
        d = sample_dataset(A, 20, seed=0, snr_db=20.0)
        assert not np.allclose(d.B, d.X @ A.T)


class TestStagewise:
    def test_zero_steps_keep_parameters(self):
        model, train, val = setup(K=2)
        before = {k: p.raw.copy() for k, p in model.store.items()}
        cfg = TrainConfig(K=2, stages=(Stage((0,), 1e-2, 0), Stage((0, 1), 1e-2, 0)))
        res = stagewise_train(model, train, val, cfg)
        for k, p in model.store.items():
            np.testing.assert_array_equal(p.raw, before[k])
        assert res.initial_val_nmse_db == res.final_val_nmse_db

    def test_improves(self):
        model, train, val = setup(K=4)
        res = stagewise_train(model, train, val, TrainConfig(K=4, lr=1e-2, steps_per_stage=30, batch_size=32))
        assert res.final_val_nmse_db < res.initial_val_nmse_db - 1.0
        assert len(res.log) == 12 and len(res.log[0]) == len(LOG_COLUMNS)

    def test_deterministic(self):
        logs = []
        for _ in range(2):
            model, train, val = setup(K=2)
            logs.append(stagewise_train(model, train, val, TrainConfig(K=2, steps_per_stage=3)).log)
        assert logs[0] == logs[1]

    @pytest.mark.parametrize("variant", ["HCISTA", "HALISTA", "HGLISTA", "HELISTA"])
    def test_constraints_hold(self, variant):
        model, train, val = setup(variant, K=2, M=16, N=32)
        seen = []
        stagewise_train(model, train, val, TrainConfig(K=2, lr=1e-2, steps_per_stage=4, batch_size=16),
                        progress=lambda *a: (model.check_constraints(), seen.append(a[0])))
        assert seen == list(range(6))

    def test_divergence_raises(self):
        model, train, val = setup("HCISTA_F", K=2, M=16, N=32)
        with pytest.raises(TrainingError):
            stagewise_train(model, train, val, TrainConfig(K=2, lr=1e6, steps_per_stage=20))

    def test_k_mismatch(self):
        model, train, val = setup(K=2)
        with pytest.raises(ArgumentError):
            stagewise_train(model, train, val, TrainConfig(K=3))

    def test_small_lr_descends(self):
        model, train, _ = setup(K=3)
        B, X = train.B[:64], train.X[:64]
        names = [n for n, p in model.store.items() if p.trainable]
        losses = []
        for _ in range(51):
            T = Tape()
            loss = mse_loss(T, model.forward(T, B), X)
            losses.append(float(T.value(loss)))
            adam_step(model.store, T.backward(loss), 1e-4, names=names)
        assert np.sum(np.diff(losses) <= 0) >= 45

    def test_predict_and_evaluate(self):
        model, _, val = setup(K=2)
        out = predict(model, val.B, chunk=7)
        assert out.shape == val.X.shape
        assert evaluate(model, val) == pytest.approx(nmse_db_batch(out, val.X))
