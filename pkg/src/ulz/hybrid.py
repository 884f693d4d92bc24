"""Hybrid proximal iterations with a free-form operator between two steps.

Every step function takes the current :class:`IterState`, the problem, an
operator ``op(v, x, n) -> u`` and a dict of per-iteration parameters, and
returns the next state. The returned state carries the intermediate vectors
(``v``, ``u``, ``w``) of the iteration that produced it.

The convex-combination weight is given either directly as ``alpha`` (checked
against its lower bound) or as ``alpha_frac`` in ``[0, 1)``, meaning
``alpha = lower + alpha_frac * (1 - lower)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import reparam_interval, sigmoid
from .core import (
    ProblemInstance, SolverTrace, eval_objective, multistage_threshold, soft_threshold,
    spectral_norm_sq, ss_threshold, top_k_mask,
)
from .errors import ArgumentError, ConstraintError
from .rng import stream

VARIANTS = ("HCISTA", "HCISTA_F", "HLISTA_CP", "HLISTA_CPSS", "HALISTA", "HGLISTA", "HELISTA")
MODES = ("untrained", "trained", "certified")
IN_T_TOL = 1e-12
LAMBDA_FLOOR = 1e-300
INV_PROP_OFFSET = 0.001


@dataclass(frozen=True)
class HybridConfig:
    variant: str
    K: int = 16
    lambda0: float = 0.1
    C_lambda: float = 1.0
    lambda_factor: float = 0.999
    p: float = 0.7
    p_max: float = 13.0
    gamma1: float = 1.0
    gamma_helista: tuple = (0.9, 1.0, 1.1, 0.9)
    epsilon0: float = 1.0
    rho0: float = 1.0
    gate_switch: int | None = None
    mode: str = "untrained"
    alpha_margin: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {self.variant!r}")
        if self.mode not in MODES:
            raise ArgumentError(f"unknown mode {self.mode!r}")
        if self.K < 1:
            raise ArgumentError("K must be at least 1")
        if self.lambda0 <= 0:
            raise ArgumentError("lambda0 must be positive")
        if not 0 < self.lambda_factor <= 1:
            raise ArgumentError("lambda_factor must lie in (0, 1]")
        if self.p <= 0 or self.p_max <= 0 or self.p_max > 100:
            raise ArgumentError("need p > 0 and 0 < p_max <= 100")
        if self.epsilon0 <= 0:
            raise ArgumentError("epsilon0 must be positive")
        if not 0 < self.rho0 <= 1:
            raise ArgumentError("rho0 must lie in (0, 1]")

    @property
    def switch(self):
        """First iteration that uses the inverse proportional gain gate."""
        return max(self.K - 6, 1) if self.gate_switch is None else self.gate_switch


@dataclass
class IterState:
    n: int
    x: np.ndarray
    x_prev: np.ndarray | None = None
    v: np.ndarray | None = None
    u: np.ndarray | None = None
    w: np.ndarray | None = None
    v_half: np.ndarray | None = None
    w_half: np.ndarray | None = None
    lam: float | None = None
    t: float | None = None
    delta: float | None = None
    alpha: float | None = None
    alpha_lower: float | None = None
    thetas: tuple = ()
    theta_hats: tuple = ()
    kappa: np.ndarray | None = None
    in_T: bool = False
    extras: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, N, lam=None):
        return cls(0, np.zeros(N), lam=lam)


# shared pieces -----------------------------------------------------------------

def keep_count(n, p, p_max, N):
    """``floor(min(p n, p_max) / 100 * N)``."""
    pct = min(p * n, p_max)
    return min(N, int(math.floor(pct / 100.0 * N + 1e-9)))


def cp_alpha_lower(theta1, theta2):
    """``theta2 / (theta1 + theta2)``; 1 when ``theta1 == 0``."""
    if theta1 < 0 or theta2 < 0:
        raise ConstraintError(f"thresholds must be nonnegative, got {theta1}, {theta2}")
    if theta1 == 0:
        return 1.0
    return theta2 / (theta1 + theta2)


def hcista_alpha_lower(du2, dv2, t, delta, L):
    """``du2 / (du2 + (1 - 2 t delta L) dv2)`` from squared distances to x."""
    return du2 / (du2 + (1.0 - 2.0 * t * delta * L) * dv2)


def helista_alpha_lower(thetas, gammas):
    t1, t2, t3, t4 = thetas
    g2, g4 = gammas[1], gammas[3]
    num = g4 * t3 + t4
    den = g2 * t1 + t2 + num
    if den == 0:
        return 1.0
    return num / den


def choose_alpha(lower, params, free=False):
    """Resolve ``alpha`` from ``params`` given its lower bound."""
    lower = float(params.get("alpha_lower", lower))
    if "alpha" in params:
        a = float(params["alpha"])
        if free:
            if not 0.0 <= a <= 1.0:
                raise ConstraintError(f"alpha={a} outside [0, 1]")
            return a
        if a < lower - 1e-15 or a > 1.0 or (a == 1.0 and lower < 1.0):
            raise ConstraintError(f"alpha={a} violates lower <= alpha < 1 with lower={lower}")
        return a
    frac = float(params.get("alpha_frac", 0.0))
    if not 0.0 <= frac < 1.0:
        raise ConstraintError(f"alpha_frac={frac} outside [0, 1)")
    return lower + (1.0 - lower) * frac


def _grad_step(A, b, x, W):
    """``x + W^T (b - A x)``."""
    return x + W.T @ (b - A @ x)


def _ms(z, theta, theta_hat):
    # a zero threshold makes the multistage operator the identity
    if theta == 0:
        return np.array(z, dtype=np.float64, copy=True)
    return multistage_threshold(z, theta, theta_hat)


def _L(problem, params):
    return params["L"] if "L" in params else spectral_norm_sq(problem.A)


# HCISTA ------------------------------------------------------------------------

def hcista_constrain(delta_raw, t_raw, lambda_prev, x, x_prev, v=None, u=None,
                     C_lambda=1.0, factor=0.999, L=1.0):
    """Map unconstrained values into the admissible ``(delta, t, lambda)`` box.

    Returns ``(delta, t, lam, alpha_lower)``; ``alpha_lower`` is ``None``
    unless ``v`` and ``u`` are given.
    """
    delta = float(reparam_interval(delta_raw, 0.25, 0.5))
    lo, hi = 1.0 / (4.0 * delta * L), 1.0 / L
    t = float(lo + (hi - lo) * sigmoid(np.asarray(t_raw)))
    if x_prev is None:
        lam = float(lambda_prev)
    else:
        gap = float(np.linalg.norm(np.asarray(x) - np.asarray(x_prev)))
        lam = max(factor * min(lambda_prev, C_lambda * gap), LAMBDA_FLOOR)
    alpha_lower = None
    if v is not None and u is not None:
        dv2 = float(np.sum((np.asarray(v) - x) ** 2))
        du2 = float(np.sum((np.asarray(u) - x) ** 2))
        alpha_lower = 1.0 if dv2 <= IN_T_TOL**2 else hcista_alpha_lower(du2, dv2, t, delta, L)
    return delta, t, lam, alpha_lower


def check_hcista_params(t, delta, lam, L):
    if not 0.25 < delta < 0.5:
        raise ConstraintError(f"delta={delta} outside (0.25, 0.5)")
    lo, hi = 1.0 / (4.0 * delta * L), 1.0 / L
    if t < lo * (1 - 1e-12) or t > hi * (1 + 1e-12):
        raise ConstraintError(f"t={t} outside [1/(4 delta ||A||^2), 1/||A||^2] = [{lo}, {hi}]")
    if lam <= 0:
        raise ConstraintError(f"lambda={lam} must be positive")


def hcista_step(state: IterState, problem: ProblemInstance, operator, params, free=False):
    """One HCISTA iteration; ``free=True`` gives the unconstrained HCISTA-F form."""
    A, b, x = problem.A, problem.b, state.x
    t, lam = float(params["t"]), float(params["lam"])
    delta = params.get("delta")
    L = _L(problem, params)
    if free:
        if t <= 0 or lam < 0:
            raise ConstraintError("HCISTA-F needs t > 0 and lambda >= 0")
    else:
        check_hcista_params(t, float(delta), lam, L)
    v = soft_threshold(x - t * (A.T @ (A @ x - b)), lam * t)
    u = np.asarray(operator(v, x, state.n), dtype=np.float64)
    w = soft_threshold(u - t * (A.T @ (A @ u - b)), lam * t)
    dv2 = float(np.sum((v - x) ** 2))
    du2 = float(np.sum((u - x) ** 2))
    in_T = math.sqrt(dv2) <= IN_T_TOL
    if free:
        lower = 0.0
        alpha = choose_alpha(lower, params, free=True)
    elif in_T:
        lower, alpha = 1.0, 1.0
    else:
        lower = hcista_alpha_lower(du2, dv2, t, float(delta), L)
        alpha = choose_alpha(lower, params)
    x_new = x.copy() if (in_T and not free) else alpha * v + (1.0 - alpha) * w
    eta = None if in_T else math.sqrt(du2 / dv2)
    return IterState(state.n + 1, x_new, x, v, u, w, lam=lam, t=t, delta=delta, alpha=alpha,
                     alpha_lower=lower, thetas=(lam * t, lam * t), in_T=in_T, extras={"eta": eta})


# LISTA-type steps -----------------------------------------------------------------

def _finish_cp(state, x, v, u, w, theta1, theta2, params, extras):
    lower = cp_alpha_lower(theta1, theta2)
    alpha = 1.0 if theta1 == 0 else choose_alpha(lower, params)
    x_new = alpha * v + (1.0 - alpha) * w
    dv = float(np.linalg.norm(v - x))
    extras.setdefault("eta", None if dv <= IN_T_TOL else float(np.linalg.norm(u - x)) / dv)
    return IterState(state.n + 1, x_new, x, v, u, w, alpha=alpha, alpha_lower=lower,
                     thetas=(theta1, theta2), in_T=dv <= IN_T_TOL, extras=extras)


def hlista_cp_step(state: IterState, problem: ProblemInstance, operator, params):
    A, b, x = problem.A, problem.b, state.x
    theta1, theta2 = float(params["theta1"]), float(params["theta2"])
    if theta1 < 0 or theta2 < 0:
        raise ConstraintError(f"thresholds must be nonnegative, got {theta1}, {theta2}")
    W_bar = params["W_bar"]
    W_hat = params.get("W_hat", W_bar)
    v = soft_threshold(_grad_step(A, b, x, W_bar), theta1)
    u = np.asarray(operator(v, x, state.n), dtype=np.float64)
    w = soft_threshold(_grad_step(A, b, u, W_hat), theta2)
    return _finish_cp(state, x, v, u, w, theta1, theta2, params, {})


def _psi(z, theta, keep, support):
    """Support entries that pass the selection unchanged."""
    mask = np.zeros(z.shape, dtype=bool)
    mask[np.asarray(support, dtype=int)] = True
    return int(np.count_nonzero(top_k_mask(z, keep) & (np.abs(z) > theta) & mask))


def hlista_cpss_step(state: IterState, problem: ProblemInstance, operator, params, p, p_max):
    """CP step with support selection; ``keep_count`` follows ``min(p n, p_max)``."""
    if p <= 0:
        raise ArgumentError("p must be positive")
    A, b, x = problem.A, problem.b, state.x
    theta1, theta2 = float(params["theta1"]), float(params["theta2"])
    if theta1 < 0 or theta2 < 0:
        raise ConstraintError(f"thresholds must be nonnegative, got {theta1}, {theta2}")
    W_bar = params["W_bar"]
    W_hat = params.get("W_hat", W_bar)
    keep = keep_count(state.n, p, p_max, x.size)
    zv = _grad_step(A, b, x, W_bar)
    v = ss_threshold(zv, theta1, keep)
    u = np.asarray(operator(v, x, state.n), dtype=np.float64)
    zw = _grad_step(A, b, u, W_hat)
    w = ss_threshold(zw, theta2, keep)
    extras = {"keep_count": keep,
              "psi_v": _psi(zv, theta1, keep, problem.support),
              "psi_w": _psi(zw, theta2, keep, problem.support)}
    return _finish_cp(state, x, v, u, w, theta1, theta2, params, extras)


def halista_gamma1_max(mu_hat, s):
    """Upper end of the admissible ``gamma1`` interval."""
    return 2.0 / (1.0 + 4.0 * mu_hat * s - 2.0 * mu_hat)


def halista_step(state: IterState, problem: ProblemInstance, operator, params):
    g1 = float(params["gamma1"])
    g2 = float(params.get("gamma2", 1.0))
    if g2 != 1.0:
        raise ConstraintError(f"gamma2 must equal 1, got {g2}")
    g1_max = params.get("gamma1_max")
    if g1 <= 0 or (g1_max is not None and g1 >= g1_max):
        raise ConstraintError(f"gamma1={g1} outside (0, {g1_max if g1_max is not None else 'inf'})")
    W = params["W"]
    inner = dict(params, W_bar=g1 * W, W_hat=g2 * W)
    out = hlista_cp_step(state, problem, operator, inner)
    out.extras["gamma1"] = g1
    return out


# gates ---------------------------------------------------------------------------

def gain_piecewise_linear(xi1, xi2, theta_min, Xi):
    return xi1 * theta_min * np.maximum(1.0 - np.maximum(xi2 * Xi, 0.0), 0.0)


def gain_inverse_proportional(xi1, xi2, theta_min, Xi):
    return xi1 * theta_min / (xi2 * Xi + INV_PROP_OFFSET)


def overshoot_gate(a, W_o, U_o, z, b, W_lin):
    """``1 + a * sigmoid(W_o z + U_o b) * |W_lin^T b|``."""
    return 1.0 + a * sigmoid(W_o @ z + U_o @ b) * np.abs(W_lin.T @ b)


def gate_bounds(v_prev, w_prev, theta1, theta2, support, rho=None):
    """Admissible gain interval on ``Q = S & (supp v | supp w)``.

    Returns ``(Q, lo, hi, rho_min)``; ``lo``/``hi`` are ``N``-vectors valid
    on ``Q`` and ``rho_min`` is the smallest admissible ``rho``.
    """
    t_max, t_min = max(theta1, theta2), min(theta1, theta2)
    av, aw = np.abs(v_prev), np.abs(w_prev)
    Xi, Ups = np.maximum(av, aw), np.minimum(av, aw)
    in_S = np.zeros(v_prev.shape, dtype=bool)
    in_S[np.asarray(support, dtype=int)] = True
    Q = in_S & ((av > 0) | (aw > 0))
    rho_min = 0.0
    if Q.any():
        num = t_max * Xi[Q] - t_min * Ups[Q]
        den = t_max * Xi[Q] + t_min * Ups[Q]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / den, 1.0)
        rho_min = float(ratio.max())
    r = rho_min if rho is None else rho
    lo = np.zeros_like(Xi)
    hi = np.zeros_like(Xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        lo[Q] = np.where(Ups[Q] > 0, (1.0 - r) * t_max / Ups[Q], np.where(r >= 1.0, 0.0, np.inf))
        hi[Q] = (1.0 + r) * t_min / Xi[Q]
    return Q, lo, hi, rho_min


def hglista_step(state: IterState, problem: ProblemInstance, operator, params):
    """Gain-gated CP step. ``params["kappa"]`` (or ``None``) sets ``g = 1 + kappa``;
    ``params["overshoot"]`` optionally holds ``a1, a2, Wo1, Uo1, Wo2, Uo2``."""
    A, b, x = problem.A, problem.b, state.x
    theta1, theta2 = float(params["theta1"]), float(params["theta2"])
    if theta1 < 0 or theta2 < 0:
        raise ConstraintError(f"thresholds must be nonnegative, got {theta1}, {theta2}")
    W_bar = params["W_bar"]
    W_hat = params.get("W_hat", W_bar)
    kappa = params.get("kappa")
    osh = params.get("overshoot")
    if kappa is not None and state.n == 0:
        raise ConstraintError("the gain gate is not used in the first iteration")
    g = None if kappa is None else 1.0 + np.asarray(kappa, dtype=np.float64)
    gx = x if g is None else g * x
    v = soft_threshold(_grad_step(A, b, gx, W_bar), theta1)
    if osh is not None:
        o1 = overshoot_gate(osh["a1"], osh["Wo1"], osh["Uo1"], x, b, W_bar)
        v = o1 * v + (1.0 - o1) * x
    u = np.asarray(operator(v, x, state.n), dtype=np.float64)
    gu = u if g is None else g * u
    w = soft_threshold(_grad_step(A, b, gu, W_hat), theta2)
    if osh is not None:
        o2 = overshoot_gate(osh["a2"], osh["Wo2"], osh["Uo2"], u, b, W_hat)
        w = o2 * w + (1.0 - o2) * u
    extras = {"gx": gx, "gu": gu}
    out = _finish_cp(state, x, v, u, w, theta1, theta2, params, extras)
    out.kappa = None if kappa is None else np.asarray(kappa)
    return out


# HELISTA -------------------------------------------------------------------------

def check_helista_gammas(gammas):
    g1, g2, g3, g4 = gammas
    if not 0 < g1 < 1:
        raise ConstraintError(f"gamma1={g1} outside (0, 1)")
    if g2 <= 0:
        raise ConstraintError(f"gamma2={g2} must be positive")
    if not g3 > 1:
        raise ConstraintError(f"gamma3={g3} must exceed 1")
    if not 0 < g4 < 1:
        raise ConstraintError(f"gamma4={g4} outside (0, 1)")


def theta_hat(theta, eps):
    if eps <= 0:
        raise ConstraintError(f"epsilon={eps} must be positive")
    return (1.0 + 1.0 / eps) * theta


def helista_step(state: IterState, problem: ProblemInstance, operator, params):
    A, b, x = problem.A, problem.b, state.x
    W = params["W"]
    gammas = tuple(float(g) for g in params["gammas"])
    thetas = tuple(float(t) for t in params["thetas"])
    eps = tuple(float(e) for e in params["eps"])
    check_helista_gammas(gammas)
    if any(t < 0 for t in thetas):
        raise ConstraintError(f"thresholds must be nonnegative, got {thetas}")
    hats = tuple(theta_hat(t, e) for t, e in zip(thetas, eps))
    g1, g2, g3, g4 = gammas
    z1 = x + g1 * (W.T @ (b - A @ x))
    v = _ms(z1, thetas[0], hats[0])
    z2 = x + g2 * (W.T @ (b - A @ v))
    v_half = _ms(z2, thetas[1], hats[1])
    u = np.asarray(operator(v_half, x, state.n), dtype=np.float64)
    z3 = u + g3 * (W.T @ (b - A @ u))
    w = _ms(z3, thetas[2], hats[2])
    z4 = u + g4 * (W.T @ (b - A @ w))
    w_half = _ms(z4, thetas[3], hats[3])
    degenerate = thetas[0] == 0 and thetas[1] == 0
    lower = 1.0 if degenerate else helista_alpha_lower(thetas, gammas)
    alpha = 1.0 if degenerate else choose_alpha(lower, params)
    x_new = alpha * v_half + (1.0 - alpha) * w_half
    dv = float(np.linalg.norm(v_half - x))
    eta = None if dv <= IN_T_TOL else float(np.linalg.norm(u - x)) / dv
    return IterState(state.n + 1, x_new, x, v, u, w, v_half, w_half, alpha=alpha, alpha_lower=lower,
                     thetas=thetas, theta_hats=hats, in_T=dv <= IN_T_TOL,
                     extras={"eta": eta, "pre": (z1, z2, z3, z4), "eps": eps, "gammas": gammas})


def compute_band_sets(state: IterState, thetas, theta_hats, support):
    """Support entries per stage in the small band ``|z| <= theta_hat - theta``
    and the large band ``theta_hat - theta < |z| < theta_hat``."""
    idx = np.asarray(support, dtype=int)
    out = {}
    for name, z, t, th in zip(("V", "V_half", "W", "W_half"), state.extras["pre"], thetas, theta_hats):
        mag = np.abs(z[idx])
        if t == 0:
            small = large = 0
        else:
            small = int(np.count_nonzero(mag <= th - t))
            large = int(np.count_nonzero((mag > th - t) & (mag < th)))
        out[f"{name}_S"] = small
        out[f"{name}_L"] = large
    return out


def q_star(bands, eps, s):
    """Largest of ``|S| + |.._S| + eps_l |.._L| - 1`` over the four stages."""
    names = ("V", "V_half", "W", "W_half")
    return max(s + bands[f"{k}_S"] + e * bands[f"{k}_L"] - 1 for k, e in zip(names, eps))


# untrained runs ------------------------------------------------------------------

def _record(trace, problem, st, lam_obj, **diag):
    trace.record(st.x, eval_objective(problem.A, problem.b, st.x, lam_obj),
                 problem.x_star, problem.support, **diag)


def hcista_untrained_run(problem: ProblemInstance, operator, cfg: HybridConfig, rng=None):
    """HCISTA with randomly drawn ``(delta, t, alpha)`` inside their ranges.

    ``lambda`` follows ``factor * min(lambda_prev, C ||x^n - x^{n-1}||)``.
    The recorded objective at index ``n`` uses ``lambda^n``.
    """
    rng = rng if rng is not None else stream(cfg.seed, "untrained")
    L = spectral_norm_sq(problem.A)
    st = IterState.initial(problem.shape[1], cfg.lambda0)
    trace = SolverTrace()
    _record(trace, problem, st, cfg.lambda0, lam=cfg.lambda0)
    lam = cfg.lambda0
    for _ in range(cfg.K):
        delta = float(rng.uniform(0.25, 0.5))
        while delta <= 0.25:
            delta = float(rng.uniform(0.25, 0.5))
        lo, hi = 1.0 / (4.0 * delta * L), 1.0 / L
        t = float(rng.uniform(lo, hi))
        frac = float(rng.random())
        st = hcista_step(st, problem, operator, {"t": t, "delta": delta, "lam": lam, "L": L,
                                                 "alpha_frac": frac})
        lam = max(cfg.lambda_factor * min(lam, cfg.C_lambda * float(np.linalg.norm(st.x - st.x_prev))),
                  LAMBDA_FLOOR)
        _record(trace, problem, st, lam, lam=lam, alpha=st.alpha, theta1=st.thetas[0],
                theta2=st.thetas[1], eta=st.extras["eta"], in_T=st.in_T, t=t, delta=delta)
    return trace


def run_with_params(problem: ProblemInstance, operator, variant, schedule, cfg: HybridConfig | None = None):
    """Run ``variant`` with ``schedule(n, state) -> params`` for each iteration."""
    cfg = cfg or HybridConfig(variant)
    st = IterState.initial(problem.shape[1], cfg.lambda0)
    trace = SolverTrace()
    lam_obj = cfg.lambda0
    _record(trace, problem, st, lam_obj)
    for n in range(cfg.K):
        params = schedule(n, st)
        st = step(variant, st, problem, operator, params, cfg)
        if "lam" in params:
            lam_obj = float(params.get("lam_next", params["lam"]))
        _record(trace, problem, st, lam_obj, alpha=st.alpha,
                theta1=st.thetas[0] if st.thetas else None,
                theta2=st.thetas[1] if len(st.thetas) > 1 else None,
                eta=st.extras.get("eta"), in_T=st.in_T)
    return trace


def step(variant, state, problem, operator, params, cfg: HybridConfig):
    if variant == "HCISTA":
        return hcista_step(state, problem, operator, params)
    if variant == "HCISTA_F":
        return hcista_step(state, problem, operator, params, free=True)
    if variant == "HLISTA_CP":
        return hlista_cp_step(state, problem, operator, params)
    if variant == "HLISTA_CPSS":
        return hlista_cpss_step(state, problem, operator, params, cfg.p, cfg.p_max)
    if variant == "HALISTA":
        return halista_step(state, problem, operator, params)
    if variant == "HGLISTA":
        return hglista_step(state, problem, operator, params)
    if variant == "HELISTA":
        return helista_step(state, problem, operator, params)
    raise ArgumentError(f"unknown variant {variant!r}")

