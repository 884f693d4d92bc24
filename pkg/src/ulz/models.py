"""Unrolled hybrid models: parameter layouts, taped batch forward passes and
numeric runs driven by the same parameter store.

Per-iteration parameters are named ``<name>.<n>`` and carry ``layer=n``;
shared ones (``W``, gate matrices, operator kernels) have no layer.
Interval-constrained quantities whose bounds depend on other parameters or
on the data are stored as fractions in ``(0, 1)``:

* ``alpha.<n>``: position of ``alpha`` in ``[alpha_lower, 1)``;
* ``t.<n>`` (HCISTA): position of ``t`` in ``[1/(4 delta L), 1/L]``;
* ``lam.<n>`` (HCISTA, ``n >= 1``): ratio ``lambda^n / min(lambda^{n-1}, C ||x^n - x^{n-1}||)``.

Bounds that depend on the data enter the tape as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .core import SolverTrace, as_matrix, spectral_norm_sq
from .dictgen import analytic_W
from .errors import ArgumentError, ConfigError, NumericError
from .hybrid import (
    IN_T_TOL, INV_PROP_OFFSET, LAMBDA_FLOOR, VARIANTS, HybridConfig, IterState, _record,
    check_helista_gammas, gain_inverse_proportional, gain_piecewise_linear, hcista_alpha_lower,
    keep_count, step,
)
from .neuralop import ConvResidual, ConvStackSpec, ZeroOperator, init_conv_params

COUNT_FORMS = VARIANTS + ("ALISTA",)
HALISTA_GAMMA_RANGE = (0.0, 2.0)
HELISTA_GAMMA_RANGES = ((0.0, 1.0), None, (1.0, 5.0), (0.0, 1.0))


@dataclass(frozen=True)
class ModelShape:
    """Enough structure to count parameters without building a model."""

    variant: str
    K: int
    M: int
    N: int
    op_spec: ConvStackSpec | None = ConvStackSpec()


def count_parameters(model) -> int:
    """Trainable scalars of ``model`` (an ``UnrolledModel`` or ``ModelShape``).

    ``ALISTA`` counts the plain form with one threshold and one step size per
    iteration and no operator.
    """
    v, K, M, N = model.variant, model.K, model.M, model.N
    if v not in COUNT_FORMS:
        raise ArgumentError(f"unknown variant {v!r}")
    spec = model.op_spec
    op = 0 if spec is None else spec.n_params * (1 if spec.shared else K)
    if v == "ALISTA":
        return 2 * K
    per_iter = {"HCISTA": 3, "HCISTA_F": 2, "HLISTA_CP": 3, "HLISTA_CPSS": 3, "HALISTA": 4,
                "HGLISTA": 3, "HELISTA": 13}[v]
    total = per_iter * K + op
    if v in ("HCISTA", "HCISTA_F"):
        total += K - 1  # lambda^1 .. lambda^{K-1}; lambda^0 is a hyperparameter
    if v in ("HLISTA_CP", "HLISTA_CPSS", "HGLISTA", "HELISTA"):
        total += M * N
    if v == "HGLISTA":
        total += 2 * (N * N + N * M) + 4 * (K - 1)
    return total


class UnrolledModel:
    """``K`` unrolled iterations of one hybrid variant on a fixed dictionary."""

    def __init__(self, cfg: HybridConfig, A, op_spec: ConvStackSpec | None = ConvStackSpec(),
                 store: ParamStore | None = None):
        self.cfg = cfg
        self.A = as_matrix(A)
        self.op_spec = op_spec
        self.L = spectral_norm_sq(self.A)
        self.W_fixed = None
        if self.variant in ("HALISTA", "HELISTA"):
            try:
                self.W_fixed = analytic_W(self.A).W
            except NumericError:
                if self.variant == "HALISTA":
                    raise
        if store is None:
            store = self._init_store()
        else:
            self._check_store(store)
        self.store = store
        if op_spec is None:
            self.operator = ZeroOperator()
        else:
            self.operator = ConvResidual(op_spec, store, "op")

    variant = property(lambda self: self.cfg.variant)
    K = property(lambda self: self.cfg.K)
    M = property(lambda self: self.A.shape[0])
    N = property(lambda self: self.A.shape[1])

    # parameters -------------------------------------------------------------
    def _init_store(self):
        cfg, K, M, N = self.cfg, self.K, self.M, self.N
        s = ParamStore()
        theta0 = cfg.lambda0 / self.L
        v = self.variant
        for n in range(K):
            if v == "HCISTA":
                s.add(f"delta.{n}", 0.375, ("interval", 0.25, 0.5), layer=n)
                s.add(f"t.{n}", 0.5, ("simplex-pair",), layer=n)
                s.add(f"alpha.{n}", 0.5, ("simplex-pair",), layer=n)
                if n > 0:
                    s.add(f"lam.{n}", cfg.lambda_factor if cfg.lambda_factor < 1 else 0.999,
                          ("simplex-pair",), layer=n)
            elif v == "HCISTA_F":
                s.add(f"t.{n}", 1.0 / self.L, ("positive",), layer=n)
                s.add(f"alpha.{n}", 0.5, ("simplex-pair",), layer=n)
                if n > 0:
                    s.add(f"lam.{n}", cfg.lambda0, ("positive",), layer=n)
            elif v == "HELISTA":
                for l in range(1, 5):
                    s.add(f"theta{l}.{n}", theta0, ("positive",), layer=n)
                    s.add(f"eps{l}.{n}", cfg.epsilon0, ("positive",), layer=n)
                    rng = HELISTA_GAMMA_RANGES[l - 1]
                    g = cfg.gamma_helista[l - 1]
                    s.add(f"gamma{l}.{n}", g, ("positive",) if rng is None else ("interval", *rng), layer=n)
                s.add(f"alpha.{n}", 0.5, ("simplex-pair",), layer=n)
            else:
                s.add(f"theta1.{n}", theta0, ("positive",), layer=n)
                s.add(f"theta2.{n}", theta0, ("positive",), layer=n)
                s.add(f"alpha.{n}", 0.5, ("simplex-pair",), layer=n)
                if v == "HALISTA":
                    s.add(f"gamma1.{n}", cfg.gamma1, ("interval", *HALISTA_GAMMA_RANGE), layer=n)
                if v == "HGLISTA" and n > 0:
                    s.add(f"xi1.{n}", 1.0, ("positive",), layer=n)
                    s.add(f"xi2.{n}", 1.0, ("positive",), layer=n)
                    s.add(f"a1.{n}", 0.0, layer=n)
                    s.add(f"a2.{n}", 0.0, layer=n)
        if v in ("HLISTA_CP", "HLISTA_CPSS", "HGLISTA"):
            s.add("W", self.A / self.L)
        elif v == "HALISTA":
            s.add("W", self.W_fixed, trainable=False)
        elif v == "HELISTA":
            if self.W_fixed is None:
                s.add("W", self.A / self.L)
            else:
                # gamma3 > 1 with the unit-diagonal analytic W overshoots; start from a nonexpansive step
                s.add("W", self.W_fixed / np.linalg.norm(self.W_fixed.T @ self.A, 2))
        if v == "HGLISTA":
            for k in ("1", "2"):
                s.add(f"Wo{k}", np.zeros((N, N)))
                s.add(f"Uo{k}", np.zeros((N, M)))
        if self.op_spec is not None:
            if self.op_spec.shared:
                init_conv_params(s, self.op_spec, cfg.seed, "op")
            else:
                for n in range(K):
                    init_conv_params(s, self.op_spec, cfg.seed, f"op{n}", layer=n)
        return s

    def _check_store(self, store):
        expected = self._init_store()
        missing = [k for k in expected if k not in store]
        extra = [k for k in store if k not in expected]
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in expected.items():
            if store[k].raw.shape != p.raw.shape:
                raise ConfigError(f"parameter {k!r} has shape {store[k].raw.shape}, expected {p.raw.shape}")

    def layers(self):
        """Names grouped by layer; key ``None`` holds shared parameters."""
        out = {}
        for name, p in self.store.items():
            out.setdefault(p.layer, []).append(name)
        return out

    def _eff(self, name):
        return self.store.effective(name)

    # numeric runs -------------------------------------------------------------
    def iteration_params(self, n, st: IterState, problem):
        """Parameter dict for ``hybrid.step`` at iteration ``n``."""
        v, cfg, e = self.variant, self.cfg, self._eff
        if v == "HCISTA":
            delta = float(e(f"delta.{n}"))
            lo, hi = 1.0 / (4.0 * delta * self.L), 1.0 / self.L
            t = lo + (hi - lo) * float(e(f"t.{n}"))
            lam = cfg.lambda0 if n == 0 else self._next_lambda(n, st.lam, st.x, st.x_prev)
            return {"t": t, "delta": delta, "lam": lam, "L": self.L, "alpha_frac": float(e(f"alpha.{n}"))}
        if v == "HCISTA_F":
            lam = cfg.lambda0 if n == 0 else float(e(f"lam.{n}"))
            return {"t": float(e(f"t.{n}")), "lam": lam, "alpha": float(e(f"alpha.{n}"))}
        if v == "HELISTA":
            return {"W": e("W"), "gammas": tuple(float(e(f"gamma{l}.{n}")) for l in range(1, 5)),
                    "thetas": tuple(float(e(f"theta{l}.{n}")) for l in range(1, 5)),
                    "eps": tuple(float(e(f"eps{l}.{n}")) for l in range(1, 5)),
                    "alpha_frac": float(e(f"alpha.{n}"))}
        params = {"theta1": float(e(f"theta1.{n}")), "theta2": float(e(f"theta2.{n}")),
                  "alpha_frac": float(e(f"alpha.{n}"))}
        if v == "HALISTA":
            params.update(W=self.W_fixed, gamma1=float(e(f"gamma1.{n}")), gamma2=1.0)
            return params
        params["W_bar"] = e("W")
        if v == "HGLISTA" and n > 0:
            params["kappa"] = self._kappa_numeric(n, st)
            params["overshoot"] = {"a1": float(e(f"a1.{n}")), "a2": float(e(f"a2.{n}")),
                                   "Wo1": e("Wo1"), "Uo1": e("Uo1"), "Wo2": e("Wo2"), "Uo2": e("Uo2")}
        return params

    def _next_lambda(self, n, lam_prev, x, x_prev):
        bound = min(lam_prev, self.cfg.C_lambda * float(np.linalg.norm(x - x_prev)))
        return max(float(self._eff(f"lam.{n}")) * bound, LAMBDA_FLOOR)

    def _kappa_numeric(self, n, st):
        t_min = min(st.thetas[0], st.thetas[1])
        Xi = np.maximum(np.abs(st.v), np.abs(st.w))
        xi1, xi2 = float(self._eff(f"xi1.{n}")), float(self._eff(f"xi2.{n}"))
        if n < self.cfg.switch:
            return gain_piecewise_linear(xi1, xi2, t_min, Xi)
        return gain_inverse_proportional(xi1, xi2, t_min, Xi)

    def solve(self, problem) -> SolverTrace:
        """Numeric run of the ``K`` iterations on one instance."""
        if problem.A.shape != self.A.shape:
            raise ArgumentError(f"instance shape {problem.A.shape} does not match model {self.A.shape}")
        cfg = self.cfg
        st = IterState.initial(self.N, cfg.lambda0)
        trace = SolverTrace()
        _record(trace, problem, st, cfg.lambda0, lam=cfg.lambda0)
        for n in range(self.K):
            params = self.iteration_params(n, st, problem)
            st = step(self.variant, st, problem, self.operator, params, cfg)
            lam = params.get("lam", cfg.lambda0)
            _record(trace, problem, st, lam, lam=params.get("lam"), alpha=st.alpha,
                    theta1=st.thetas[0] if st.thetas else None,
                    theta2=st.thetas[1] if len(st.thetas) > 1 else None,
                    eta=st.extras.get("eta"), in_T=st.in_T)
        return trace

    # taped batch forward ------------------------------------------------------
    def forward(self, tape: Tape, B):
        """Record the ``K`` iterations for measurements ``B`` of shape ``(batch, M)``.

        Returns the node id of ``x^K`` with shape ``(batch, N)``.
        """
        B = np.asarray(B, dtype=np.float64)
        if B.ndim != 2 or B.shape[1] != self.M:
            raise ArgumentError(f"expected measurements of shape (batch, {self.M}), got {B.shape}")
        ctx = _Ctx(tape, tape.const(self.A), tape.const(B), B.shape[0], self)
        x = tape.const(np.zeros((B.shape[0], self.N)))
        fn = {"HCISTA": self._tape_hcista, "HCISTA_F": self._tape_hcista_f,
              "HELISTA": self._tape_helista, "HGLISTA": self._tape_hglista}.get(self.variant, self._tape_cp)
        return fn(ctx, x)

    def _op(self, ctx, v, x, n):
        return self.operator.record(ctx.tape, v, x, n)

    def _tape_hcista(self, ctx, x):
        T, L = ctx.tape, self.L
        lam_val = np.full((ctx.batch, 1), self.cfg.lambda0)
        x_prev_val = None
        for n in range(self.K):
            delta = T.param(self.store, f"delta.{n}")
            lo = T.reciprocal(T.scale(delta, 4.0 * L))
            t = T.add(lo, T.hadamard(T.sub(T.const(1.0 / L), lo), T.param(self.store, f"t.{n}")))
            if n == 0:
                lam = T.const(lam_val)
            else:
                xv = T.value(x)
                gap = np.linalg.norm(xv - x_prev_val, axis=1, keepdims=True)
                bound = np.minimum(lam_val, self.cfg.C_lambda * gap)
                lam = T.hadamard(T.param(self.store, f"lam.{n}"), T.const(bound))
                raw = T.value(lam)
                if np.any(raw < LAMBDA_FLOOR):
                    lam = T.add(lam, T.const(np.maximum(LAMBDA_FLOOR - raw, 0.0)))
                lam_val = T.value(lam)
            theta = T.hadamard(lam, t)
            v = T.soft_threshold(ctx.ista_point(x, t), theta)
            u = self._op(ctx, v, x, n)
            w = T.soft_threshold(ctx.ista_point(u, t), theta)
            xv, vv, uv = T.value(x), T.value(v), T.value(u)
            dv2 = np.sum((vv - xv) ** 2, axis=1, keepdims=True)
            du2 = np.sum((uv - xv) ** 2, axis=1, keepdims=True)
            in_T = np.sqrt(dv2) <= IN_T_TOL
            tv, dl = float(T.value(t)), float(T.value(delta))
            with np.errstate(divide="ignore", invalid="ignore"):
                lower = np.where(in_T, 1.0, hcista_alpha_lower(du2, dv2, tv, dl, L))
            alpha = T.add(T.const(lower), T.hadamard(T.const(1.0 - lower), T.param(self.store, f"alpha.{n}")))
            x_new = ctx.combine(alpha, v, w)
            if in_T.any():
                keep = in_T.astype(np.float64)
                x_new = T.add(T.hadamard(T.const(1.0 - keep), x_new), T.hadamard(T.const(keep), x))
            x_prev_val = xv
            x = x_new
        return x

    def _tape_hcista_f(self, ctx, x):
        T = ctx.tape
        for n in range(self.K):
            t = T.param(self.store, f"t.{n}")
            lam = T.const(self.cfg.lambda0) if n == 0 else T.param(self.store, f"lam.{n}")
            theta = T.hadamard(lam, t)
            v = T.soft_threshold(ctx.ista_point(x, t), theta)
            u = self._op(ctx, v, x, n)
            w = T.soft_threshold(ctx.ista_point(u, t), theta)
            x = ctx.combine(T.param(self.store, f"alpha.{n}"), v, w)
        return x

    def _cp_alpha(self, ctx, n, th1, th2):
        T = ctx.tape
        lower = T.hadamard(th2, T.reciprocal(T.add(th1, th2)))
        return T.add(lower, T.hadamard(T.sub(T.const(1.0), lower), T.param(self.store, f"alpha.{n}")))

    def _tape_cp(self, ctx, x):
        T, v_ = ctx.tape, self.variant
        if v_ == "HALISTA":
            W = T.const(self.W_fixed)
        else:
            W = T.param(self.store, "W")
        for n in range(self.K):
            th1 = T.param(self.store, f"theta1.{n}")
            th2 = T.param(self.store, f"theta2.{n}")
            g1 = T.param(self.store, f"gamma1.{n}") if v_ == "HALISTA" else None
            keep = keep_count(n, self.cfg.p, self.cfg.p_max, self.N) if v_ == "HLISTA_CPSS" else 0
            thr = (lambda z, th: T.ss_threshold(z, th, keep)) if v_ == "HLISTA_CPSS" else T.soft_threshold
            v = thr(ctx.grad_point(x, W, g1), th1)
            u = self._op(ctx, v, x, n)
            w = thr(ctx.grad_point(u, W), th2)
            x = ctx.combine(self._cp_alpha(ctx, n, th1, th2), v, w)
        return x

    def _tape_hglista(self, ctx, x):
        T = ctx.tape
        W = T.param(self.store, "W")
        prev = None
        for n in range(self.K):
            th1 = T.param(self.store, f"theta1.{n}")
            th2 = T.param(self.store, f"theta2.{n}")
            if n == 0:
                gx, gate = x, None
            else:
                v_p, w_p, t1_p, t2_p = prev
                Xi = np.maximum(np.abs(T.value(v_p)), np.abs(T.value(w_p)))
                t_min = t1_p if float(T.value(t1_p)) <= float(T.value(t2_p)) else t2_p
                xi1 = T.param(self.store, f"xi1.{n}")
                xi2 = T.param(self.store, f"xi2.{n}")
                scaled = T.hadamard(xi2, T.const(Xi))
                if n < self.cfg.switch:
                    shape = T.relu(T.sub(T.const(1.0), T.relu(scaled)))
                else:
                    shape = T.reciprocal(T.add(scaled, T.const(INV_PROP_OFFSET)))
                kappa = T.hadamard(T.hadamard(xi1, t_min), shape)
                gate = T.add(T.const(1.0), kappa)
                gx = T.hadamard(gate, x)
            v = T.soft_threshold(ctx.grad_point(gx, W), th1)
            if n > 0:
                v = self._overshoot(ctx, n, "1", W, x, v)
            u = self._op(ctx, v, x, n)
            gu = u if gate is None else T.hadamard(gate, u)
            w = T.soft_threshold(ctx.grad_point(gu, W), th2)
            if n > 0:
                w = self._overshoot(ctx, n, "2", W, u, w)
            prev = (v, w, th1, th2)
            x = ctx.combine(self._cp_alpha(ctx, n, th1, th2), v, w)
        return x

    def _overshoot(self, ctx, n, k, W, z, target):
        T = ctx.tape
        pre = T.add(T.matvec(T.param(self.store, f"Wo{k}"), z), T.matvec(T.param(self.store, f"Uo{k}"), ctx.b))
        mag = T.abs(T.matvec(W, ctx.b, transpose=True))
        o = T.add(T.const(1.0), T.hadamard(T.hadamard(T.param(self.store, f"a{k}.{n}"), T.sigmoid(pre)), mag))
        return T.add(T.hadamard(o, target), T.hadamard(T.sub(T.const(1.0), o), z))

    def _tape_helista(self, ctx, x):
        T = ctx.tape
        W = T.param(self.store, "W")
        for n in range(self.K):
            th = [T.param(self.store, f"theta{l}.{n}") for l in range(1, 5)]
            ep = [T.param(self.store, f"eps{l}.{n}") for l in range(1, 5)]
            ga = [T.param(self.store, f"gamma{l}.{n}") for l in range(1, 5)]
            hats = [T.add(t, T.hadamard(t, T.reciprocal(e))) for t, e in zip(th, ep)]
            v = T.multistage_threshold(ctx.grad_point(x, W, ga[0]), th[0], hats[0])
            v_half = T.multistage_threshold(ctx.grad_point(x, W, ga[1], at=v), th[1], hats[1])
            u = self._op(ctx, v_half, x, n)
            w = T.multistage_threshold(ctx.grad_point(u, W, ga[2]), th[2], hats[2])
            w_half = T.multistage_threshold(ctx.grad_point(u, W, ga[3], at=w), th[3], hats[3])
            num = T.add(T.hadamard(ga[3], th[2]), th[3])
            den = T.add(T.add(T.hadamard(ga[1], th[0]), th[1]), num)
            lower = T.hadamard(num, T.reciprocal(den))
            alpha = T.add(lower, T.hadamard(T.sub(T.const(1.0), lower), T.param(self.store, f"alpha.{n}")))
            x = ctx.combine(alpha, v_half, w_half)
        return x

    def check_constraints(self):
        """Raise if any stored parameter sits outside its admissible range."""
        for name, p in self.store.items():
            val = p.effective()
            if not np.all(np.isfinite(val)):
                raise NumericError(f"parameter {name!r} is not finite")
            kind = p.constraint[0]
            if kind == "positive" and np.any(val <= 0):
                raise NumericError(f"parameter {name!r} left the positive half-line")
            if kind in ("interval", "simplex-pair"):
                lo, hi = p.bounds()
                if np.any(val < lo) or np.any(val > hi):
                    raise NumericError(f"parameter {name!r} left [{lo}, {hi}]")
        if self.variant == "HELISTA":
            for n in range(self.K):
                check_helista_gammas(tuple(float(self._eff(f"gamma{l}.{n}")) for l in range(1, 5)))


class _Ctx:
    """Shared tape nodes for one forward pass."""

    def __init__(self, tape, A, b, batch, model):
        self.tape, self.A, self.b, self.batch, self.model = tape, A, b, batch, model

    def residual(self, x):
        return self.tape.sub(self.b, self.tape.matvec(self.A, x))

    def ista_point(self, x, t):
        """``x + t A^T (b - A x)``."""
        T = self.tape
        return T.add(x, T.hadamard(t, T.matvec(self.A, self.residual(x), transpose=True)))

    def grad_point(self, x, W, gamma=None, at=None):
        """``x + gamma W^T (b - A at)`` with ``at`` defaulting to ``x``."""
        T = self.tape
        g = T.matvec(W, self.residual(x if at is None else at), transpose=True)
        if gamma is not None:
            g = T.hadamard(gamma, g)
        return T.add(x, g)

    def combine(self, alpha, v, w):
        T = self.tape
        return T.add(T.hadamard(alpha, v), T.hadamard(T.sub(T.const(1.0), alpha), w))


def build_model(variant, A, K=16, op_spec: ConvStackSpec | None = ConvStackSpec(), **cfg_kw):
    cfg = HybridConfig(variant, K=K, mode="trained", **cfg_kw)
    return UnrolledModel(cfg, A, op_spec)


__all__ = ["COUNT_FORMS", "ModelShape", "UnrolledModel", "build_model", "count_parameters"]
