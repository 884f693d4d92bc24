import numpy as np
import pytest

from ulz.autodiff import ParamStore, Tape
from ulz.core import ProblemInstance
from ulz.errors import ArgumentError, ConfigError, NumericError
from ulz.hybrid import VARIANTS, HybridConfig
from ulz.models import ModelShape, UnrolledModel, build_model, count_parameters
from ulz.neuralop import ConvStackSpec

from conftest import small_problem

SMALL_SPEC = ConvStackSpec(layers=((3, 1, 2), (3, 2, 2), (3, 2, 1)))


class TestCountParameters:
    @pytest.mark.parametrize("variant,expected", [
        ("HLISTA_CP", 127640), ("HCISTA", 2655), ("HCISTA_F", 2639), ("ALISTA", 32),
    ])
    def test_table_values(self, variant, expected):
        assert count_parameters(ModelShape(variant, 16, 250, 500)) == expected

    def test_helista_decomposition(self):
        # 13 scalars per iteration, the shared W and the operator
        assert count_parameters(ModelShape("HELISTA", 16, 250, 500)) == 13 * 16 + 250 * 500 + 2592 == 127800

    def test_unshared_operator(self):
        spec = ConvStackSpec(shared=False)
        assert count_parameters(ModelShape("HCISTA_F", 4, 10, 20, spec)) - \
            count_parameters(ModelShape("HCISTA_F", 4, 10, 20, None)) == 4 * 2592

    def test_unknown(self):
        with pytest.raises(ArgumentError):
            count_parameters(ModelShape("LISTA", 4, 10, 20))

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("spec", [SMALL_SPEC, None])
    def test_store_agrees(self, variant, spec):
        p = small_problem(10, 20, seed=1)
        model = build_model(variant, p.A, K=3, op_spec=spec)
        assert model.store.count() == count_parameters(model)
        assert count_parameters(model) == count_parameters(ModelShape(variant, 3, 10, 20, spec))


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_tape_matches_numeric(self, variant):
        p = small_problem(16, 32, seed=2)
        model = build_model(variant, p.A, K=4, op_spec=SMALL_SPEC, seed=3)
        rng = np.random.default_rng(0)
        X = np.where(rng.random((3, 32)) < 0.15, rng.standard_normal((3, 32)), 0.0)
        X[:, 0] = 1.0
        B = X @ p.A.T
        T = Tape()
        out = T.value(model.forward(T, B))
        for i in range(3):
            prob = ProblemInstance.from_signal(p.A, X[i], b=B[i])
            np.testing.assert_allclose(out[i], model.solve(prob).final, rtol=0, atol=1e-10)

    def test_bad_measurement_shape(self):
        p = small_problem()
        model = build_model("HLISTA_CP", p.A, K=2, op_spec=None)
        with pytest.raises(ArgumentError):
            model.forward(Tape(), np.zeros((2, 7)))

    def test_solve_shape_check(self):
        model = build_model("HLISTA_CP", small_problem().A, K=2, op_spec=None)
        with pytest.raises(ArgumentError):
            model.solve(small_problem(10, 20))

    def test_trace_has_eta(self):
        p = small_problem(seed=4)
        tr = build_model("HCISTA", p.A, K=5, op_spec=SMALL_SPEC).solve(p)
        eta = [e for e in tr.column("eta") if e is not None]
        assert len(tr) == 6 and all(np.isfinite(eta))


class TestStore:
    def test_layers(self):
        model = build_model("HLISTA_CP", small_problem().A, K=3, op_spec=None)
        groups = model.layers()
        assert groups[None] == ["W"]
        assert sorted(groups[2]) == ["alpha.2", "theta1.2", "theta2.2"]

    def test_rejects_missing(self):
        p = small_problem()
        model = build_model("HLISTA_CP", p.A, K=2, op_spec=None)
        store = ParamStore()
        for name, prm in model.store.items():
            if name != "theta1.1":
                store._params[name] = prm
        with pytest.raises(ConfigError):
            UnrolledModel(model.cfg, p.A, None, store)

    def test_rejects_shape(self):
        p = small_problem()
        model = build_model("HLISTA_CP", p.A, K=2, op_spec=None)
        bad = model.store.copy()
        bad["W"].raw = np.zeros((3, 3))
        with pytest.raises(ConfigError):
            UnrolledModel(model.cfg, p.A, None, bad)

    def test_round_trip_store(self):
        p = small_problem()
        model = build_model("HGLISTA", p.A, K=3, op_spec=SMALL_SPEC)
        again = UnrolledModel(model.cfg, p.A, SMALL_SPEC, model.store.copy())
        np.testing.assert_array_equal(again.solve(p).final, model.solve(p).final)

    def test_check_constraints(self):
        model = build_model("HLISTA_CP", small_problem().A, K=2, op_spec=None)
        model.check_constraints()
        model.store["theta1.0"].raw = np.array(np.nan)
        with pytest.raises(NumericError):
            model.check_constraints()

    def test_helista_init_is_stable(self):
        # the initial W must keep the untrained forward pass bounded
        p = small_problem(25, 50, seed=5)
        tr = UnrolledModel(HybridConfig("HELISTA", K=8), p.A, None).solve(p)
        assert tr.nmse_db[-1] < 0.0
