"""Runs with the threshold schedules that make the error bounds checkable.

The thresholds use the known target ``x*``; the supremum over the signal
class is replaced by the maximum over the supplied instances (one instance
in the plain mode). ``mu_hat`` is the coherence achieved by the ``W`` in use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import SolverTrace, eval_objective, soft_threshold, ss_threshold, support_of
from .dictgen import analytic_W, coherence
from .errors import ArgumentError, ConstraintError, PreconditionError
from .hybrid import (
    HybridConfig, IterState, _grad_step, _ms, check_helista_gammas, compute_band_sets, gate_bounds,
    halista_gamma1_max, halista_step, helista_alpha_lower, helista_step, hglista_step,
    hlista_cp_step, hlista_cpss_step, keep_count, q_star, theta_hat,
)

CERTIFIED_VARIANTS = ("HLISTA_CP", "HLISTA_CPSS", "HALISTA", "HGLISTA", "HELISTA")
HELISTA_CERT_GAMMAS = (0.3, 1.0, 5.0, 0.1)
BOUND_SLACK = 1e-12
# relative inflation of oracle thresholds: with equal-magnitude cross coherences the
# off-support pre-threshold entries sit exactly on the threshold and rounding would
# otherwise leave residues of order 1e-17
THETA_GUARD = 1e-9


@dataclass
class CertifiedReport:
    variant: str
    feasible: bool
    reason: str | None = None
    mu_hat: float = math.nan
    support_size: int = 0
    B_x: float = math.nan
    c: float | None = None
    batch: int = 1
    support_ok: list = field(default_factory=list)
    bound: list = field(default_factory=list)
    error_l2: list = field(default_factory=list)
    rate: list = field(default_factory=list)
    bands: list = field(default_factory=list)

    @property
    def violations(self):
        """Iterations where the support leaks or the error exceeds the bound."""
        out = []
        for n, (ok, bnd, err) in enumerate(zip(self.support_ok, self.bound, self.error_l2)):
            if not ok or (bnd is not None and err > bnd * (1 + BOUND_SLACK) + BOUND_SLACK):
                out.append(n)
        return out


def rate_cp(mu, s):
    return -math.log(4 * mu * s - 2 * mu)


def rate_cpss(mu, s, psi):
    return -math.log(4 * mu * s - 2 * mu - 2 * mu * psi)


def rate_halista(mu, s, g1, g2=1.0):
    return -math.log(2 * mu * g1 * (2 * s - 1) + abs(1 - g1) + g1 * abs(1 - g2) / g2)


def rate_hglista(mu, s, rho, s_star):
    return -math.log(4 * mu * s - 2 * mu - 2 * (1 - rho) * mu * s_star)


def rate_helista(mu, q, gammas):
    g1, g2, g3, g4 = gammas
    arg = (g1 * g2 * (1 + q * mu + abs(1 - g1) / g1) * (2 * q * mu + abs(1 - g4 + g3 * g4) / g3)
           + abs(1 - g2 + g1 * g2))
    return -math.log(arg)


def oracle_thetas(variant, state, x_star, support, mu_hat, gammas=None, u=None, w=None):
    """Oracle thresholds for one instance from the vectors available so far.

    ``state`` supplies ``x`` (or the gated ``g * x`` for HGLISTA via
    ``state.extras["gx"]``); ``u`` and ``w`` are the later-stage vectors.
    Entries that cannot be formed yet are ``None``.
    """
    s = len(support)
    if s < 2:
        raise PreconditionError(f"|S| = {s}; the thresholds need |S| >= 2")
    N = x_star.size
    tail = mu_hat * (N - s) / (s - 1)
    x = state.x
    if variant in ("HLISTA_CP", "HLISTA_CPSS", "HALISTA", "HGLISTA"):
        g = 1.0 if variant != "HALISTA" else gammas[0]
        t1 = g * mu_hat * float(np.abs(x - x_star).sum())
        t2 = None
        if u is not None:
            t2 = mu_hat * float(np.abs(u - x_star).sum()) + tail * float(np.abs(u).sum())
        return t1, t2
    if variant == "HELISTA":
        g1, g2, g3, g4 = gammas
        v = state.v
        t1 = g1 * mu_hat * float(np.abs(x - x_star).sum())
        t2 = None if v is None else g2 * mu_hat * float(np.abs(v - x_star).sum())
        t3 = None if u is None else g3 * mu_hat * float(np.abs(u - x_star).sum())
        t4 = None
        if w is not None and u is not None:
            t4 = (g4 * mu_hat * float(np.abs(w - x_star).sum()) + g4 * tail * float(np.abs(w).sum())
                  + g3 * g4 * tail * float(np.abs(u).sum()))
        return t1, t2, t3, t4
    raise ArgumentError(f"no oracle thresholds for {variant!r}")


def _pick_alpha(lower, margin):
    if lower >= 1.0:
        return 1.0
    a = lower + margin
    if a < 1.0:
        return a
    mid = 0.5 * (lower + 1.0)
    # no double lies strictly between lower and 1 when lower is 1 - ulp
    return mid if mid < 1.0 else lower


def _infeasible(variant, reason, **kw):
    return CertifiedReport(variant, False, reason, **kw)


def _check_batch(problems):
    if not problems:
        raise ArgumentError("need at least one problem instance")
    A = problems[0].A
    S = tuple(problems[0].support.tolist())
    for p in problems[1:]:
        if p.A.shape != A.shape or not np.array_equal(p.A, A):
            raise ArgumentError("batch certification needs a shared dictionary")
        if tuple(p.support.tolist()) != S:
            raise ArgumentError("batch certification needs a shared support")
    return A, np.asarray(S, dtype=int)


def certified_run(variant, problem, operator, cfg: HybridConfig, W=None, gammas=None, mu_hat=None):
    """Single-instance certified run; returns ``(SolverTrace, CertifiedReport)``.

    The trace is None when a precondition fails; ``report.reason`` says which.
    ``mu_hat`` may carry ``coherence(A, W)`` when ``W`` is reused across runs.
    """
    traces, report = certified_run_batch(variant, [problem], operator, cfg, W, gammas, mu_hat)
    return (traces[0] if traces else None), report


class _OncePerInput:
    """Operator wrapper that evaluates each ``(n, v)`` once, so the oracle
    thresholds and the step see the same ``u``."""

    def __init__(self, op):
        self.op = op
        self.cache = {}

    def __call__(self, v, x=None, n=0):
        v = np.asarray(v, dtype=np.float64)
        key = (n, v.tobytes(), None if x is None else np.asarray(x, dtype=np.float64).tobytes())
        if key not in self.cache:
            self.cache[key] = np.asarray(self.op(v, x, n), dtype=np.float64)
        return self.cache[key].copy()


def certified_run_batch(variant, problems, operator, cfg: HybridConfig, W=None, gammas=None, mu_hat=None):
    """Lock-step certified run over instances sharing ``A`` and the support."""
    if variant not in CERTIFIED_VARIANTS:
        raise ArgumentError(f"no certified mode for {variant!r}")
    A, S = _check_batch(problems)
    N = A.shape[1]
    s = S.size
    if W is None:
        rep = analytic_W(A)
        W, mu = rep.W, rep.mu_hat
    else:
        mu = coherence(A, W) if mu_hat is None else float(mu_hat)
    B_x = max(float(np.max(np.abs(p.x_star))) for p in problems)
    base = dict(mu_hat=mu, support_size=s, B_x=B_x, batch=len(problems))
    if s < 2:
        return [], _infeasible(variant, f"|S| = {s} violates |S| >= 2", **base)
    if B_x <= 0:
        return [], _infeasible(variant, "B_x = 0 violates B_x > 0", **base)
    limit = (2 + 1 / mu) / 4 if mu > 0 else math.inf
    if variant != "HELISTA" and not s < limit:
        return [], _infeasible(variant, f"|S| = {s} violates |S| < (2 + 1/mu)/4 = {limit:.6g}", **base)
    c = rate_cp(mu, s) if mu > 0 and variant != "HELISTA" else None
    if variant == "HALISTA":
        g1 = cfg.gamma1 if gammas is None else gammas[0]
        g1_max = halista_gamma1_max(mu, s)
        if not 0 < g1 < g1_max:
            return [], _infeasible(variant, f"gamma1 = {g1} violates 0 < gamma1 < {g1_max:.6g}", **base)
        gammas = (g1, 1.0)
    if variant == "HELISTA":
        gammas = HELISTA_CERT_GAMMAS if gammas is None else tuple(gammas)
        try:
            check_helista_gammas(gammas)
        except ConstraintError as exc:
            return [], _infeasible(variant, str(exc), **base)
    report = CertifiedReport(variant, True, None, c=c, **base)
    runner = _STEPPERS[variant]
    states = [IterState.initial(N) for _ in problems]
    traces = [SolverTrace() for _ in problems]
    _log(report, traces, problems, states, S, bound=s * B_x, lam=cfg.lambda0)
    log_sum = 0.0
    for n in range(cfg.K):
        op = _OncePerInput(operator)
        states, rate, extra = runner(states, problems, op, W, mu, S, cfg, gammas)
        report.rate.append(rate)
        report.bands.append(extra)
        if variant == "HGLISTA":
            # the first iteration is a plain CP step and contracts by exp(-c)
            log_sum += c if n == 0 else report.rate[n - 1] if report.rate[n - 1] is not None else 0.0
            bound = s * B_x * math.exp(-log_sum)
        elif variant == "HELISTA":
            if rate is None or rate <= 0 or any(r is None or r <= 0 for r in report.rate):
                bound = None
            else:
                log_sum += rate
                bound = s * B_x * math.exp(-log_sum)
        else:
            log_sum += rate
            bound = s * B_x * math.exp(-log_sum)
        _log(report, traces, problems, states, S, bound=bound, lam=cfg.lambda0)
    return traces, report


def _log(report, traces, problems, states, S, bound, lam):
    errs, ok = [], True
    for tr, p, st in zip(traces, problems, states):
        errs.append(float(np.linalg.norm(st.x - p.x_star)))
        ok &= bool(np.all(np.isin(support_of(st.x), S)))
        th = st.thetas
        tr.record(st.x, eval_objective(p.A, p.b, st.x, lam), p.x_star, p.support,
                  alpha=st.alpha, theta1=th[0] if th else None, theta2=th[1] if len(th) > 1 else None,
                  eta=st.extras.get("eta"), bound=bound, in_T=st.in_T)
    report.error_l2.append(max(errs))
    report.support_ok.append(ok)
    report.bound.append(bound)


def _guard(floor, theta):
    return theta * (1.0 + THETA_GUARD) + floor


def _rounding_floor(problems):
    # absolute rounding level of x + W^T (b - A x) once the relative guard is negligible
    N = problems[0].A.shape[1]
    scale = max(max(float(np.abs(p.b).max()), float(np.abs(p.x_star).max())) for p in problems)
    return N * np.finfo(np.float64).eps * scale


def _tail(mu, N, s):
    return mu * (N - s) / (s - 1)


def _step_cp_like(states, problems, operator, W, mu, S, cfg, gammas, variant):
    fl = _rounding_floor(problems)
    N, s = W.shape[1], S.size
    g1 = gammas[0] if variant == "HALISTA" else 1.0
    W_bar = g1 * W
    t1 = _guard(fl, g1 * mu * max(float(np.abs(st.x - p.x_star).sum()) for st, p in zip(states, problems)))
    us = []
    for st, p in zip(states, problems):
        z = _grad_step(p.A, p.b, st.x, W_bar)
        if variant == "HLISTA_CPSS":
            v = ss_threshold(z, t1, keep_count(st.n, cfg.p, cfg.p_max, N))
        else:
            v = soft_threshold(z, t1)
        us.append(np.asarray(operator(v, st.x, st.n), dtype=np.float64))
    t2 = _guard(fl, max(mu * float(np.abs(u - p.x_star).sum()) + _tail(mu, N, s) * float(np.abs(u).sum())
                    for u, p in zip(us, problems)))
    lower = t2 / (t1 + t2) if t1 > 0 else 1.0
    params = {"theta1": t1, "theta2": t2, "alpha": _pick_alpha(lower, cfg.alpha_margin)}
    out = []
    for st, p in zip(states, problems):
        if variant == "HALISTA":
            out.append(halista_step(st, p, operator, dict(params, W=W, gamma1=g1, gamma2=1.0)))
        elif variant == "HLISTA_CPSS":
            out.append(hlista_cpss_step(st, p, operator, dict(params, W_bar=W), cfg.p, cfg.p_max))
        else:
            out.append(hlista_cp_step(st, p, operator, dict(params, W_bar=W)))
    if variant == "HALISTA":
        return out, rate_halista(mu, s, g1), {}
    if variant == "HLISTA_CPSS":
        psi = min(min(o.extras["psi_v"], o.extras["psi_w"]) for o in out)
        return out, rate_cpss(mu, s, psi), {"psi_v": min(o.extras["psi_v"] for o in out),
                                            "psi_w": min(o.extras["psi_w"] for o in out)}
    return out, rate_cp(mu, s), {}


def _step_hglista(states, problems, operator, W, mu, S, cfg, gammas):
    fl = _rounding_floor(problems)
    N, s = W.shape[1], S.size
    kappas = [None] * len(states)
    rho = None
    if states[0].n > 0:
        # gate interval from the previous iteration's v, w and thresholds
        t1p, t2p = states[0].thetas
        rho = max(gate_bounds(st.v, st.w, t1p, t2p, S)[3] for st in states)
        kappas = []
        for st in states:
            Q, lo, hi, _ = gate_bounds(st.v, st.w, t1p, t2p, S, rho)
            k = np.zeros(N)
            k[Q] = 0.5 * (lo[Q] + hi[Q])
            kappas.append(k)
    gxs = [st.x if k is None else (1.0 + k) * st.x for st, k in zip(states, kappas)]
    t1 = _guard(fl, mu * max(float(np.abs(gx - p.x_star).sum()) for gx, p in zip(gxs, problems)))
    gus = []
    for st, p, gx, k in zip(states, problems, gxs, kappas):
        v = soft_threshold(_grad_step(p.A, p.b, gx, W), t1)
        u = np.asarray(operator(v, st.x, st.n), dtype=np.float64)
        gus.append(u if k is None else (1.0 + k) * u)
    t2 = _guard(fl, max(mu * float(np.abs(gu - p.x_star).sum()) + _tail(mu, N, s) * float(np.abs(gu).sum())
                    for gu, p in zip(gus, problems)))
    lower = t2 / (t1 + t2) if t1 > 0 else 1.0
    params = {"theta1": t1, "theta2": t2, "W_bar": W, "alpha": _pick_alpha(lower, cfg.alpha_margin)}
    out = [hglista_step(st, p, operator, dict(params, kappa=k)) for st, p, k in zip(states, problems, kappas)]
    # rate constant for the gate built from this iteration's v, w (used one step later)
    rho_next = max(gate_bounds(o.v, o.w, t1, t2, S)[3] for o in out)
    s_star = min(min(np.count_nonzero(o.v), np.count_nonzero(o.w)) for o in out)
    return out, rate_hglista(mu, s, rho_next, s_star), {"rho": rho_next, "s_star": int(s_star),
                                                        "rho_used": rho}


def _step_helista(states, problems, operator, W, mu, S, cfg, gammas):
    fl = _rounding_floor(problems)
    N, s = W.shape[1], S.size
    g1, g2, g3, g4 = gammas
    eps = (cfg.epsilon0,) * 4
    tail = _tail(mu, N, s)
    t1 = _guard(fl, g1 * mu * max(float(np.abs(st.x - p.x_star).sum()) for st, p in zip(states, problems)))
    vs = [_ms(st.x + g1 * (W.T @ (p.b - p.A @ st.x)), t1, theta_hat(t1, eps[0]))
          for st, p in zip(states, problems)]
    t2 = _guard(fl, g2 * mu * max(float(np.abs(v - p.x_star).sum()) for v, p in zip(vs, problems)))
    us = []
    for st, p, v in zip(states, problems, vs):
        vh = _ms(st.x + g2 * (W.T @ (p.b - p.A @ v)), t2, theta_hat(t2, eps[1]))
        us.append(np.asarray(operator(vh, st.x, st.n), dtype=np.float64))
    t3 = _guard(fl, g3 * mu * max(float(np.abs(u - p.x_star).sum()) for u, p in zip(us, problems)))
    ws = [_ms(u + g3 * (W.T @ (p.b - p.A @ u)), t3, theta_hat(t3, eps[2])) for u, p in zip(us, problems)]
    t4 = _guard(fl, max(g4 * mu * float(np.abs(w - p.x_star).sum()) + g4 * tail * float(np.abs(w).sum())
             + g3 * g4 * tail * float(np.abs(u).sum()) for w, u, p in zip(ws, us, problems)))
    thetas = (t1, t2, t3, t4)
    deg = t1 == 0 and t2 == 0
    lower = 1.0 if deg else helista_alpha_lower(thetas, gammas)
    params = {"W": W, "gammas": gammas, "thetas": thetas, "eps": eps,
              "alpha": _pick_alpha(lower, cfg.alpha_margin)}
    out = [helista_step(st, p, operator, params) for st, p in zip(states, problems)]
    bands = [compute_band_sets(o, o.thetas, o.theta_hats, S) for o in out]
    merged = {k: max(b[k] for b in bands) for k in bands[0]}
    q = q_star(merged, eps, s)
    try:
        rate = rate_helista(mu, q, gammas)
    except ValueError:
        rate = -math.inf
    return out, rate, dict(merged, Q_star=q)


_STEPPERS = {
    "HLISTA_CP": lambda *a: _step_cp_like(*a, "HLISTA_CP"),
    "HLISTA_CPSS": lambda *a: _step_cp_like(*a, "HLISTA_CPSS"),
    "HALISTA": lambda *a: _step_cp_like(*a, "HALISTA"),
    "HGLISTA": _step_hglista,
    "HELISTA": _step_helista,
}
