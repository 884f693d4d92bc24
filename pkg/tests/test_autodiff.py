import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ulz.autodiff import (OP_KINDS, ParamStore, Tape, adam_step, conv1d_forward, load_checkpoint,
                          orthogonal_init, reparam_interval, save_checkpoint)
from ulz.errors import ArgumentError, FormatError, TrainingError

from gradcheck import op_kind_error
from oracles import naive_conv1d


class TestRecord:
    def test_add(self):
        T = Tape()
        np.testing.assert_array_equal(T.value(T.add(T.const([1.0, 2.0]), T.const([3.0, 4.0]))), [4.0, 6.0])

    def test_relu(self):
        T = Tape()
        np.testing.assert_array_equal(T.value(T.relu(T.const([-1.0, 2.0]))), [0.0, 2.0])

    def test_soft_threshold_matches_core(self):
        T = Tape()
        assert T.value(T.soft_threshold(T.const([2.5]), T.const(1.0)))[0] == 1.5

    def test_unknown_node(self):
        with pytest.raises(ArgumentError):
            Tape().relu(3)

    def test_shape_mismatch(self):
        T = Tape()
        with pytest.raises(ArgumentError):
            T.add(T.const(np.ones(2)), T.const(np.ones(3)))

    def test_loss_must_be_scalar(self):
        T = Tape()
        with pytest.raises(ArgumentError):
            T.backward(T.leaf("x", np.ones(2)))


class TestBackward:
    def test_sum_sq(self):
        T = Tape()
        x = T.leaf("x", [1.0, 2.0])
        np.testing.assert_array_equal(T.backward(T.sum_sq(x))["x"], [2.0, 4.0])

    def test_soft_threshold_active_branch(self):
        T = Tape()
        z, th = T.leaf("z", [2.0]), T.leaf("t", 0.5)
        g = T.backward(T.abs_sum(T.soft_threshold(z, th)))
        assert g["z"][0] == 1.0 and float(g["t"]) == -1.0

    def test_threshold_inactive_exact_zero(self, rng):
        z = rng.uniform(-0.5, 0.5, 20)
        for kind in ("soft", "ss", "ms"):
            T = Tape()
            zn, t = T.leaf("z", z), T.leaf("t", 0.6)
            if kind == "soft":
                out = T.soft_threshold(zn, t)
            elif kind == "ss":
                out = T.ss_threshold(zn, t, 4)
            else:
                out = T.multistage_threshold(zn, t, T.const(1.2))
            g = T.backward(T.sum_sq(T.add(out, T.const(np.ones(20)))))
            assert np.all(g["z"] == 0.0)
            assert float(g["t"]) == 0.0

    @pytest.mark.parametrize("kind", OP_KINDS)
    def test_every_op_kind_against_finite_differences(self, kind):
        for seed in range(3):
            assert op_kind_error(kind, seed) < 1e-5

    def test_three_layer_composite(self, rng):
        from oracles import central_difference, max_rel_err
        W1, W2 = rng.standard_normal((5, 4)), rng.standard_normal((3, 5))
        x0 = rng.standard_normal(4)

        def loss(T, x):
            h = T.sigmoid(T.matvec(T.const(W1), x))
            h = T.soft_threshold(T.matvec(T.const(W2), h), T.const(0.05))
            return T.sum_sq(T.softplus(h))

        T = Tape()
        g = T.backward(loss(T, T.leaf("x", x0)))["x"]

        def f(x):
            T2 = Tape()
            return float(T2.value(loss(T2, T2.const(x))))

        assert max_rel_err(g, central_difference(f, x0)) < 1e-5

    def test_bit_identical_gradients(self, rng):
        x0 = rng.standard_normal(6)

        def run():
            T = Tape()
            x = T.leaf("x", x0)
            return T.backward(T.sum_sq(T.multistage_threshold(x, T.const(0.1), T.const(0.4))))["x"]

        np.testing.assert_array_equal(run(), run())

    def test_unused_leaf_gets_zero(self):
        T = Tape()
        a, _ = T.leaf("a", [1.0]), T.leaf("b", [2.0, 3.0])
        g = T.backward(T.sum_sq(a))
        np.testing.assert_array_equal(g["b"], [0.0, 0.0])


class TestConv:
    @pytest.mark.parametrize("k", [1, 3, 4, 9])
    def test_matches_naive(self, rng, k):
        x = rng.standard_normal((2, 16))
        w = rng.standard_normal((3, 2, k))
        out, _ = conv1d_forward(x, w)
        np.testing.assert_allclose(out, naive_conv1d(x, w, k // 2), rtol=0, atol=1e-12)

    def test_batched(self, rng):
        x = rng.standard_normal((5, 1, 12))
        w = rng.standard_normal((2, 1, 3))
        out, _ = conv1d_forward(x, w)
        for i in range(5):
            np.testing.assert_allclose(out[i], naive_conv1d(x[i], w, 1), atol=1e-12)


class TestAdam:
    def test_first_step(self):
        s = ParamStore().add("w", 0.0)
        adam_step(s, {"w": np.array(1.0)}, 1e-3)
        assert s["w"].raw == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient(self):
        s = ParamStore().add("w", [1.0, 2.0])
        for _ in range(10):
            adam_step(s, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(s["w"].raw, [1.0, 2.0])

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_zero_lr_is_identity(self, w, g):
        s = ParamStore().add("w", w)
        adam_step(s, {"w": np.array(g)}, 0.0)
        assert float(s["w"].raw) == w

    def test_quadratic_bowl(self):
        s = ParamStore().add("w", 0.0)
        for _ in range(5000):
            T = Tape()
            w = T.param(s, "w")
            adam_step(s, T.backward(T.sum_sq(T.sub(w, T.const(3.0)))), 1e-2)
        assert abs(float(s["w"].raw) - 3.0) < 1e-3

    def test_non_finite_gradient(self):
        s = ParamStore().add("w", 0.0)
        with pytest.raises(TrainingError):
            adam_step(s, {"w": np.array(np.nan)}, 1e-3)

    def test_frozen_parameter(self):
        s = ParamStore().add("w", 1.0, trainable=False)
        adam_step(s, {"w": np.array(1.0)}, 1.0)
        assert float(s["w"].raw) == 1.0


class TestInit:
    def test_square_orthogonal(self):
        Q = orthogonal_init(4, 4, 0)
        np.testing.assert_allclose(Q.T @ Q, np.eye(4), atol=1e-10)

    def test_wide_rows_orthonormal(self):
        Q = orthogonal_init(2, 5, 0)
        np.testing.assert_allclose(Q @ Q.T, np.eye(2), atol=1e-10)

    def test_deterministic(self):
        np.testing.assert_array_equal(orthogonal_init(3, 7, 9, 2), orthogonal_init(3, 7, 9, 2))


class TestReparam:
    def test_midpoint(self):
        assert reparam_interval(0.0, 0.5, 1.0) == 0.75

    def test_approaches_upper(self):
        assert reparam_interval(40.0, 0.0, 1.0) <= 1.0
        assert reparam_interval(30.0, 0.0, 1.0) > 1 - 1e-12

    def test_store_constraints_round_trip(self):
        s = ParamStore()
        s.add("a", 0.3, ("interval", 0.25, 0.5)).add("b", 2.0, ("positive",)).add("c", 0.2, ("simplex-pair",))
        assert s.effective("a") == pytest.approx(0.3, abs=1e-15)
        assert s.effective("b") == pytest.approx(2.0, abs=1e-14)
        assert s.effective("c") == pytest.approx(0.2, abs=1e-15)

    def test_out_of_range_value(self):
        with pytest.raises(ArgumentError):
            ParamStore().add("a", 0.6, ("interval", 0.25, 0.5))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        s = ParamStore()
        s.add("w", rng.standard_normal((3, 4)), layer=None)
        s.add("t.2", 0.4, ("interval", 0.25, 0.5), layer=2)
        s.add("f", 1.0, trainable=False)
        adam_step(s, {"w": rng.standard_normal((3, 4))}, 1e-2)
        save_checkpoint(tmp_path / "c.ulp", s)
        back = load_checkpoint(tmp_path / "c.ulp")
        assert list(back) == list(s)
        for name, p in s.items():
            q = back[name]
            np.testing.assert_array_equal(q.raw, p.raw)
            np.testing.assert_array_equal(q.m, p.m)
            assert (q.constraint, q.layer, q.trainable, q.step) == (p.constraint, p.layer, p.trainable, p.step)
        assert (tmp_path / "c.ulp").read_bytes()[:4] == b"ULP1"

    def test_corrupt(self, tmp_path):
        (tmp_path / "c").write_bytes(b"ULP1\x05\x00")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c")
        (tmp_path / "d").write_bytes(b"XXXX")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "d")
