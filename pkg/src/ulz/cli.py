"""Command-line front end: ``ulz generate | run | train | plot``.

Exit codes: 0 success, 2 bad flags or config, 3 I/O failure, 4 infeasible
certified precondition, 5 training divergence, 6 empty trace CSV.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from xml.sax.saxutils import escape


from .autodiff import load_checkpoint, save_checkpoint
from .certified import CERTIFIED_VARIANTS, HELISTA_CERT_GAMMAS, certified_run
from .classical import SOLVERS, ClassicalConfig
from .core import ProblemInstance
from .dictgen import GenSpec, add_noise, identity_hadamard_dictionary, make_problem, sample_signal_k
from .errors import ArgumentError, ConfigError, ConstraintError, FormatError, TrainingError
from .formats import load_bundle, read_table, save_bundle, write_table
from .hybrid import HybridConfig, hcista_untrained_run
from .models import UnrolledModel
from .neuralop import ConvStackSpec, make_operator
from .train import LOG_COLUMNS, Stage, TrainConfig, sample_dataset, stagewise_train

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_EMPTY = 0, 2, 3, 4, 5, 6

TRACE_COLUMNS = ("n", "nmse_db", "objective", "true_frac", "false_frac",
                 "alpha", "theta1", "theta2", "eta", "bound")
MANIFEST_COLUMNS = ("index", "bundle", "M", "N", "p", "seed", "snr_db", "kappa_achieved")
SOLVER_NAMES = {
    "ista": None, "fista": None, "admm": None,
    "hcista": "HCISTA", "hcista-f": "HCISTA_F", "hlista-cp": "HLISTA_CP", "hlista-cpss": "HLISTA_CPSS",
    "halista": "HALISTA", "hglista": "HGLISTA", "helista": "HELISTA",
}
DEFAULT_SEED = 0


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# options: name -> (type, default, help). Defaults apply after the config file.
_COMMON = {
    "seed": (int, None, "base seed (default: $ULZ_SEED or 0)"),
}
_GEN = {
    "m": (int, 50, "rows of A"),
    "n": (int, 100, "columns of A"),
    "p": (float, 0.1, "Bernoulli probability of a nonzero"),
    "k_sparse": (int, None, "exact number of nonzeros instead of Bernoulli sampling"),
    "snr_db": (float, None, "measurement SNR in dB (noiseless if omitted)"),
    "kappa": (float, None, "target condition number of A"),
    "dictionary": (str, "gaussian", "gaussian or hadamard ([I, H/sqrt(m)], n = 2m)"),
}
_OPTIONS = {
    "generate": {**_COMMON, **_GEN,
                 "count": (int, 1, "number of bundles"),
                 "out": (str, "problems", "output directory")},
    "run": {**_COMMON, **_GEN,
            "solver": (str, "ista", "comma-separated solver names"),
            "mode": (str, "untrained", "untrained, certified or checkpoint"),
            "checkpoint": (str, None, "ULP1 file for --mode checkpoint"),
            "k": (int, 16, "iterations"),
            "lambda": (float, 0.1, "lambda (classical) or lambda0 (hybrid)"),
            "c_lambda": (float, 1.0, "C in the adaptive lambda rule"),
            "schedule": (str, "fixed", "classical lambda schedule: fixed or adaptive"),
            "rho": (float, 1.0, "ADMM penalty"),
            "p_ss": (float, 0.7, "support selection growth per iteration (percent)"),
            "p_max": (float, 13.0, "support selection cap (percent)"),
            "gamma1": (float, 1.0, "HALISTA gamma1"),
            "gammas": (str, None, "HELISTA gamma1..gamma4, comma separated"),
            "epsilon": (float, 1.0, "HELISTA epsilon"),
            "operator": (str, "conv", "free-form operator: conv, zero or lipschitz"),
            "bundle": (str, None, "comma-separated bundle directories"),
            "manifest": (str, None, "manifest.csv from generate"),
            "out": (str, None, "output CSV (single run)"),
            "out_dir": (str, None, "output directory (several runs)"),
            "jobs": (int, 1, "parallel workers")},
    "train": {**_COMMON, **_GEN,
              "solver": (str, "hlista-cp", "hybrid solver name"),
              "k": (int, 8, "unrolled iterations"),
              "lambda": (float, 0.1, "lambda0"),
              "c_lambda": (float, 1.0, "C in the adaptive lambda rule"),
              "operator": (str, "conv", "free-form operator: conv or zero"),
              "train_size": (int, 2000, "training samples"),
              "val_size": (int, 200, "validation samples"),
              "batch_size": (int, 64, "minibatch size"),
              "lr": (float, 1e-3, "base learning rate"),
              "steps_per_stage": (int, 50, "Adam steps per stage"),
              "stages_file": (str, None, "stage schedule: lines 'layers lr steps'"),
              "bundle": (str, None, "take A from this bundle"),
              "resume": (str, None, "start from this checkpoint"),
              "deterministic": (bool, False, "accepted for clarity; runs are always deterministic"),
              "out": (str, "trained", "output directory")},
    "plot": {"out": (str, "traces.svg", "output SVG"),
             "title": (str, "NMSE vs iteration", "plot title")},
}


# config handling ---------------------------------------------------------------

def read_config(path):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{i}: expected 'key = value'", EXIT_ARGS)
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _convert(name, typ, raw):
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"{name}: expected a boolean, got {raw!r}", EXIT_ARGS)
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise CliError(f"{name}: cannot parse {raw!r} as {typ.__name__}", EXIT_ARGS) from None


def resolve_options(command, args, environ=None):
    """Flags win over the config file, which wins over defaults."""
    environ = os.environ if environ is None else environ
    table = _OPTIONS[command]
    config = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(config) - set(table))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}", EXIT_ARGS)
    out = {}
    for name, (typ, default, _) in table.items():
        flag = getattr(args, name, None)
        if flag is not None and flag is not False:
            out[name] = flag
        elif name in config:
            out[name] = _convert(name, typ, config[name])
        elif name == "seed":
            env = environ.get("ULZ_SEED")
            out[name] = _convert("ULZ_SEED", int, env) if env not in (None, "") else DEFAULT_SEED
        else:
            out[name] = default
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="ulz", description="Hybrid unrolled ISTA experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, table in _OPTIONS.items():
        sp = sub.add_parser(command)
        if command == "plot":
            sp.add_argument("inputs", nargs="+", help="trace CSV files")
        sp.add_argument("--config", help="key = value configuration file")
        for name, (typ, _, help_) in table.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=name, action="store_true", default=False, help=help_)
            else:
                sp.add_argument(flag, dest=name, type=typ, default=None, help=help_)
    return parser


# problems ---------------------------------------------------------------------

def _gen_one(opts, seed):
    M, N = opts["m"], opts["n"]
    if opts["dictionary"] == "hadamard":
        if N != 2 * M:
            raise CliError("the hadamard dictionary needs n = 2 m", EXIT_ARGS)
        A = identity_hadamard_dictionary(M)
        k = opts["k_sparse"] or max(2, int(round(opts["p"] * N)))
        x, _ = sample_signal_k(N, k, seed)
        meta = {"M": M, "N": N, "seed": seed, "snr_db": "", "kappa": "", "dictionary": "hadamard",
                "k_sparse": k}
        if opts["snr_db"] is not None:
            raise CliError("--snr-db is not supported with the hadamard dictionary", EXIT_ARGS)
        return ProblemInstance.from_signal(A, x, seed=seed), meta
    if opts["dictionary"] != "gaussian":
        raise CliError(f"unknown dictionary {opts['dictionary']!r}", EXIT_ARGS)
    spec = GenSpec(M, N, opts["p"], opts["kappa"], opts["snr_db"], seed)
    problem, meta = make_problem(spec)
    if opts["k_sparse"]:
        x, _ = sample_signal_k(N, opts["k_sparse"], seed)
        b = add_noise(problem.A @ x, opts["snr_db"], seed)
        problem = ProblemInstance.from_signal(problem.A, x, b, opts["snr_db"], seed)
        meta["k_sparse"] = opts["k_sparse"]
    meta["dictionary"] = "gaussian"
    return problem, meta


def cmd_generate(opts):
    out = Path(opts["out"])
    if opts["count"] < 1:
        raise CliError("--count must be positive", EXIT_ARGS)
    rows = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(opts["count"]):
            seed = opts["seed"] + i
            problem, meta = _gen_one(opts, seed)
            name = f"inst_{i:04d}"
            save_bundle(out / name, problem, meta)
            rows.append((i, name, problem.A.shape[0], problem.A.shape[1], opts["p"], seed,
                         meta.get("snr_db", ""), meta.get("kappa_achieved", "")))
        write_table(out / "manifest.csv", MANIFEST_COLUMNS, rows)
    except OSError as exc:
        raise CliError(f"cannot write bundles: {exc}", EXIT_IO) from None
    return EXIT_OK


# run --------------------------------------------------------------------------

def trace_rows(trace):
    rows = []
    for n in range(len(trace)):
        d = trace.diagnostics[n]
        rows.append((n, trace.nmse_db[n], trace.objective[n], trace.support_true_frac[n],
                     trace.support_false_frac[n], d.get("alpha"), d.get("theta1"), d.get("theta2"),
                     d.get("eta"), d.get("bound")))
    return rows


def _gammas(opts):
    if opts["gammas"] is None:
        return None
    try:
        g = tuple(float(s) for s in opts["gammas"].split(","))
    except ValueError:
        raise CliError("--gammas needs four comma-separated numbers", EXIT_ARGS) from None
    if len(g) != 4:
        raise CliError("--gammas needs four comma-separated numbers", EXIT_ARGS)
    return g


def _op_spec(opts):
    if opts["operator"] == "zero":
        return None
    if opts["operator"] in ("conv", "lipschitz"):
        return ConvStackSpec()
    raise CliError(f"unknown operator {opts['operator']!r}", EXIT_ARGS)


def run_one(solver, problem, opts):
    """Trace for one (solver, instance) pair."""
    K, lam = opts["k"], opts["lambda"]
    variant = SOLVER_NAMES[solver]
    if variant is None:
        if opts["mode"] != "untrained":
            raise CliError(f"{solver} only runs in untrained mode", EXIT_ARGS)
        cfg = ClassicalConfig(lam=lam, K=K, rho=opts["rho"], schedule=opts["schedule"],
                              C_lambda=opts["c_lambda"])
        return SOLVERS[solver](problem, cfg)
    cfg = HybridConfig(variant, K=K, lambda0=lam, C_lambda=opts["c_lambda"], p=opts["p_ss"],
                       p_max=opts["p_max"], gamma1=opts["gamma1"],
                       gamma_helista=_gammas(opts) or (0.9, 1.0, 1.1, 0.9), epsilon0=opts["epsilon"],
                       mode="trained" if opts["mode"] == "checkpoint" else opts["mode"], seed=opts["seed"])
    if opts["mode"] == "certified":
        if variant not in CERTIFIED_VARIANTS:
            raise CliError(f"{solver} has no certified mode", EXIT_ARGS)
        op = make_operator(opts["operator"], opts["seed"])
        gam = None
        if variant == "HALISTA":
            gam = (opts["gamma1"],)
        elif variant == "HELISTA":
            gam = _gammas(opts) or HELISTA_CERT_GAMMAS
        trace, report = certified_run(variant, problem, op, cfg, gammas=gam)
        if not report.feasible:
            raise CliError(f"infeasible: {report.reason}", EXIT_INFEASIBLE)
        return trace
    if opts["mode"] == "checkpoint":
        if not opts["checkpoint"]:
            raise CliError("--mode checkpoint needs --checkpoint FILE", EXIT_ARGS)
        try:
            store = load_checkpoint(opts["checkpoint"])
        except OSError as exc:
            raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
        layers = [p.layer for _, p in store.items() if p.layer is not None]
        K_ck = max(layers) + 1 if layers else K
        cfg = HybridConfig(**{**cfg.__dict__, "K": K_ck})
        try:
            model = UnrolledModel(cfg, problem.A, _op_spec(opts), store=store)
        except ConfigError as exc:
            raise CliError(f"checkpoint does not fit {solver}: {exc}", EXIT_ARGS) from None
        return model.solve(problem)
    if opts["mode"] != "untrained":
        raise CliError(f"unknown mode {opts['mode']!r}", EXIT_ARGS)
    if variant == "HCISTA":
        return hcista_untrained_run(problem, make_operator(opts["operator"], opts["seed"]), cfg)
    return UnrolledModel(cfg, problem.A, _op_spec(opts)).solve(problem)


def _job(args):
    solver, bundle, opts, out = args
    try:
        problem = load_bundle(bundle)[0] if bundle else _gen_one(opts, opts["seed"])[0]
    except (OSError, FormatError) as exc:
        raise CliError(f"cannot read bundle {bundle}: {exc}", EXIT_IO) from None
    trace = run_one(solver, problem, opts)
    try:
        write_table(out, TRACE_COLUMNS, trace_rows(trace))
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    return out


def _bundles(opts):
    if opts["manifest"]:
        try:
            header, rows = read_table(opts["manifest"])
        except (OSError, FormatError) as exc:
            raise CliError(f"cannot read manifest: {exc}", EXIT_IO) from None
        base = Path(opts["manifest"]).parent
        col = header.index("bundle") if "bundle" in header else 1
        return [str(base / r[col]) for r in rows]
    if opts["bundle"]:
        return opts["bundle"].split(",")
    return [None]


def cmd_run(opts):
    solvers = [s.strip() for s in opts["solver"].split(",") if s.strip()]
    for s in solvers:
        if s not in SOLVER_NAMES:
            raise CliError(f"unknown solver {s!r}; choose from {', '.join(SOLVER_NAMES)}", EXIT_ARGS)
    if opts["k"] < 1:
        raise CliError("--k must be positive", EXIT_ARGS)
    bundles = _bundles(opts)
    pairs = [(s, b) for b in bundles for s in solvers]
    if len(pairs) == 1 and opts["out"]:
        outs = [opts["out"]]
    else:
        if not opts["out_dir"]:
            raise CliError("several runs need --out-dir", EXIT_ARGS)
        d = Path(opts["out_dir"])
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create {d}: {exc}", EXIT_IO) from None
        outs = [str(d / f"{s}__{Path(b).name if b else 'generated'}.csv") for s, b in pairs]
    jobs = [(s, b, opts, o) for (s, b), o in zip(pairs, outs)]
    if opts["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=opts["jobs"]) as ex:
            list(ex.map(_job, jobs))
    else:
        for j in jobs:
            _job(j)
    return EXIT_OK


# train ------------------------------------------------------------------------

def parse_layers(text, K):
    out = set()
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-", 1)
            out.update(range(int(a), int(b) + 1))
        else:
            out.add(int(part))
    if any(not 0 <= l < K for l in out):
        raise CliError(f"stage layers {text!r} outside 0..{K - 1}", EXIT_ARGS)
    return tuple(sorted(out))


def read_stages(path, K):
    """Lines ``layers lr steps`` with layers like ``3``, ``0-3`` or ``0,2``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read stages file: {exc}", EXIT_IO) from None
    stages = []
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CliError(f"{path}:{i}: expected 'layers lr steps'", EXIT_ARGS)
        try:
            stages.append(Stage(parse_layers(parts[0], K), float(parts[1]), int(parts[2])))
        except (ValueError, ArgumentError) as exc:
            raise CliError(f"{path}:{i}: {exc}", EXIT_ARGS) from None
    return tuple(stages)


def cmd_train(opts):
    variant = SOLVER_NAMES.get(opts["solver"])
    if variant is None:
        raise CliError(f"{opts['solver']!r} is not a trainable hybrid solver", EXIT_ARGS)
    K = opts["k"]
    if opts["bundle"]:
        try:
            A = load_bundle(opts["bundle"])[0].A
        except (OSError, FormatError) as exc:
            raise CliError(f"cannot read bundle: {exc}", EXIT_IO) from None
    else:
        A = _gen_one(opts, opts["seed"])[0].A
    stages = read_stages(opts["stages_file"], K) if opts["stages_file"] else None
    cfg = HybridConfig(variant, K=K, lambda0=opts["lambda"], C_lambda=opts["c_lambda"], mode="trained",
                       seed=opts["seed"])
    store = None
    if opts["resume"]:
        try:
            store = load_checkpoint(opts["resume"])
        except OSError as exc:
            raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
    try:
        model = UnrolledModel(cfg, A, _op_spec(opts), store=store)
    except ConfigError as exc:
        raise CliError(f"checkpoint does not fit the model: {exc}", EXIT_ARGS) from None
    tcfg = TrainConfig(K=K, lr=opts["lr"], steps_per_stage=opts["steps_per_stage"],
                       batch_size=opts["batch_size"], train_size=opts["train_size"],
                       val_size=opts["val_size"], stages=stages, seed=opts["seed"])
    train = sample_dataset(A, tcfg.train_size, opts["p"], seed=opts["seed"], index=0, snr_db=opts["snr_db"])
    val = sample_dataset(A, tcfg.val_size, opts["p"], seed=opts["seed"], index=1, snr_db=opts["snr_db"])
    try:
        result = stagewise_train(model, train, val, tcfg)
    except TrainingError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.ulp", result.store)
        write_table(out / "train_log.csv", LOG_COLUMNS, result.log)
    except OSError as exc:
        raise CliError(f"cannot write training output: {exc}", EXIT_IO) from None
    print(f"val NMSE {result.initial_val_nmse_db:.3f} dB -> {result.final_val_nmse_db:.3f} dB")
    return EXIT_OK


# plot -------------------------------------------------------------------------

PLOT_W, PLOT_H = 640, 420
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _read_curve(path):
    try:
        header, rows = read_table(path)
    except FormatError:
        raise CliError(f"{path}: empty CSV", EXIT_EMPTY) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    if not rows:
        raise CliError(f"{path}: no data rows", EXIT_EMPTY)
    if "n" not in header or "nmse_db" not in header:
        raise CliError(f"{path}: missing n or nmse_db column", EXIT_ARGS)
    i_n, i_y = header.index("n"), header.index("nmse_db")
    try:
        return [(int(r[i_n]), float(r[i_y])) for r in rows if r]
    except (ValueError, IndexError):
        raise CliError(f"{path}: malformed row", EXIT_ARGS) from None


def axis_range(curves):
    """``[min - 5, max + 5]`` dB over the finite values of all curves."""
    finite = [y for c in curves for _, y in c if math.isfinite(y)]
    if not finite:
        return -5.0, 5.0
    return min(finite) - 5.0, max(finite) + 5.0


def render_svg(curves, labels, title=""):
    y_lo, y_hi = axis_range(curves)
    x_hi = max(max(n for n, _ in c) for c in curves) or 1
    pw = PLOT_W - MARGIN["left"] - MARGIN["right"]
    ph = PLOT_H - MARGIN["top"] - MARGIN["bottom"]

    def px(n):
        return MARGIN["left"] + pw * n / x_hi

    def py(y):
        y = min(max(y, y_lo), y_hi)
        return MARGIN["top"] + ph * (y_hi - y) / (y_hi - y_lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" '
           f'viewBox="0 0 {PLOT_W} {PLOT_H}">',
           f'<rect x="0" y="0" width="{PLOT_W}" height="{PLOT_H}" fill="white"/>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           'fill="none" stroke="black"/>',
           f'<text x="{PLOT_W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{PLOT_H - 12}" text-anchor="middle" '
           'font-size="12">iteration</text>',
           f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">NMSE (dB)</text>']
    for i in range(6):
        y = y_lo + (y_hi - y_lo) * i / 5
        out.append(f'<text class="ytick" x="{MARGIN["left"] - 6}" y="{py(y) + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{y:.1f}</text>')
    for i in range(6):
        n = x_hi * i / 5
        out.append(f'<text class="xtick" x="{px(n):.1f}" y="{MARGIN["top"] + ph + 16}" '
                   f'text-anchor="middle" font-size="10">{n:g}</text>')
    for j, (curve, label) in enumerate(zip(curves, labels)):
        color = COLORS[j % len(COLORS)]
        pts = " ".join(f"{px(n):.2f},{py(y if math.isfinite(y) else (y_lo if y < 0 else y_hi)):.2f}"
                       for n, y in curve)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for n, y in curve:
            if y == -math.inf:
                out.append(f'<circle class="clipped" cx="{px(n):.2f}" cy="{py(y_lo):.2f}" r="3" '
                           f'fill="none" stroke="{color}"/>')
        ly = MARGIN["top"] + 14 + 18 * j
        lx = PLOT_W - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" '
                   'stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 25}" y="{ly}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(opts, inputs):
    curves = [_read_curve(p) for p in inputs]
    labels = [Path(p).stem for p in inputs]
    svg = render_svg(curves, labels, opts["title"])
    try:
        Path(opts["out"]).write_text(svg)
    except OSError as exc:
        raise CliError(f"cannot write {opts['out']}: {exc}", EXIT_IO) from None
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args.command, args)
        if args.command == "generate":
            return cmd_generate(opts)
        if args.command == "run":
            return cmd_run(opts)
        if args.command == "train":
            return cmd_train(opts)
        return cmd_plot(opts, args.inputs)
    except CliError as exc:
        print(f"ulz: {exc}", file=sys.stderr)
        return exc.code
    except (ArgumentError, ConstraintError, ConfigError) as exc:
        print(f"ulz: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (OSError, FormatError) as exc:
        print(f"ulz: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
