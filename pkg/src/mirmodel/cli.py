"""Command-line interface: ``mirmodel {fit,select,test,simulate}``.

Exit codes: 0 success, 1 internal error, 2 input error, 3 non-convergence,
4 test precondition or regime error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .estimate import FEASIBILITY_MODES, FitOptions, fit_qmle
from .extensions import (
    fit_covariates,
    fit_endogenous,
    fit_individual_effects,
    fit_interactions,
    fit_time_effects,
)
from .gof import VARIANCE_FORMS, TestPreconditionError, influence_test
from .io import (
    InputError,
    RunManifest,
    read_config,
    read_long_panel,
    read_y_csv,
    stamp_csv,
    write_json,
    write_residuals_csv,
)
from .model import MirData
from .select import STRATEGIES, select_subsets
from .simlab import SimConfig, StudyFailedError, run_study, table_presets
from .weights import WeightConstructionError, WeightSet, build_weight_set, read_attributes_csv

log = logging.getLogger("mirmodel")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_REGIME = 0, 1, 2, 3, 4
MODELS = ("basic", "covariates", "interactions", "individual", "time", "endogenous")
THREADS_ENV = "MIRMODEL_THREADS"
#: Arguments that do not affect results and stay out of the manifest id.
VOLATILE_ARGS = ("threads", "out", "verbose", "config", "func")


class NonConvergenceError(RuntimeError):
    pass


def default_threads():
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------

def load_inputs(args):
    """Build :class:`MirData` (plus optional X and Z) from the CLI arguments."""
    Y = read_y_csv(args.y)
    panel = None
    if args.weights:
        weights = WeightSet.from_csv_dir(args.weights)
    elif args.attributes:
        panel = read_attributes_csv(args.attributes, discrete=args.discrete or ())
        weights = build_weight_set(panel, args.density)
    else:
        raise InputError("give --weights DIR or --attributes FILE")
    if Y.shape != (weights.T, weights.n):
        raise InputError(
            f"{args.y} has T={Y.shape[0]}, n={Y.shape[1]} but weights have T={weights.T}, n={weights.n}"
        )
    data = MirData(Y, weights)
    X = read_long_panel(args.x, data.T, data.n) if getattr(args, "x", None) else None
    Z = None
    if getattr(args, "z", None):
        Z = read_long_panel(args.z, data.T, data.n)
    elif panel is not None:
        Z = np.transpose(panel.values.astype(float), (1, 2, 0))
    return data, X, Z


def fit_options(args):
    return FitOptions(feasibility=args.feasibility, se=args.se)


def run_model(args, data, X, Z):
    opts = fit_options(args)
    model = args.model
    if model in ("covariates", "interactions") and X is None:
        raise InputError(f"--model {model} needs --x")
    if model == "endogenous" and Z is None:
        raise InputError("--model endogenous needs --z or --attributes")
    if model == "basic":
        return fit_qmle(data, opts)
    if model == "covariates":
        return fit_covariates(data, X, opts)
    if model == "interactions":
        return fit_interactions(data, X, opts)
    if model == "individual":
        return fit_individual_effects(data, X, opts)
    if model == "time":
        return fit_time_effects(data, X, opts)
    return fit_endogenous(data, Z, opts)


def manifest_for(args, inputs):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in VOLATILE_ARGS}
    return RunManifest.create(args.command, config, inputs, args.seed)


def _inputs(args):
    keys = ("y", "weights", "attributes", "x", "z", "config")
    return {k: getattr(args, k, None) for k in keys}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    data, X, Z = load_inputs(args)
    fit = run_model(args, data, X, Z)
    man = manifest_for(args, _inputs(args))
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "estimates.json"), {"model": args.model, **fit.to_dict()}, man)
    write_residuals_csv(os.path.join(args.out, "residuals.csv"), fit.residuals, man)
    man.write(args.out)
    for name, est, se, p in zip(fit.param_names, fit.params, fit.std_errors, fit.p_values()):
        print(f"{name:>14s} {est: .6f} (se {se:.6f}, p {p:.4g})")
    print(f"loglik {fit.loglik:.6f}  converged={fit.converged}  iterations={fit.iterations}")
    if not fit.converged:
        raise NonConvergenceError(fit.message)
    return EXIT_OK


def cmd_select(args):
    data, _, _ = load_inputs(args)
    res = select_subsets(data, args.gamma, args.qmax, args.strategy, fit_options(args))
    man = manifest_for(args, _inputs(args))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "selection.csv")
    res.to_csv(path)
    stamp_csv(path, man)
    man.write(args.out)
    best = "{" + ",".join(str(k + 1) for k in res.best_subset) + "}"
    print(f"selected {best}  EBIC {res.ebic_value:.6f}  (gamma={res.gamma:g}, q_max={res.q_max})")
    if res.failed:
        print(f"{len(res.failed)} subset fits failed or did not converge")
    return EXIT_OK


def cmd_test(args):
    data, _, _ = load_inputs(args)
    if data.T < 3:
        raise TestPreconditionError(f"the adequacy test needs T >= 3, got T={data.T}")
    fit = fit_qmle(data, fit_options(args))
    if not fit.converged:
        raise NonConvergenceError(fit.message)
    res = influence_test(data, fit, args.alpha, args.variance_form)
    man = manifest_for(args, _inputs(args))
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "gof.json"), res.to_dict(), man)
    man.write(args.out)
    print(res.verdict())
    print("variance components: " + ", ".join(f"{k}={v:.6g}" for k, v in res.terms.items()))
    if res.regime_warning:
        print(f"warning: n/T = {res.n_over_T:.3g} is outside the calibrated regime")
    return EXIT_OK


def parse_cell(text):
    """``"n=25,T=25,d=2"`` to a dict of numbers."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise InputError(f"bad --cell entry {part!r}; use key=value")
        k, v = part.split("=", 1)
        out[k.strip()] = float(v) if "." in v else int(v)
    return out


def _cell_stem(cfg):
    stem = f"n{cfg.n}_T{cfg.T}_d{cfg.d}"
    if cfg.setting == "alternative":
        stem += f"_kappa{cfg.kappa:g}"
    return stem


def simulate_configs(args):
    if args.table:
        reps = args.reps or 500
        cells = table_presets(args.table, reps, args.seed)
        if args.cell:
            want = parse_cell(args.cell)
            cells = [c for c in cells if all(getattr(c, k) == v for k, v in want.items())]
            if not cells:
                raise InputError(f"no cell of table {args.table} matches {args.cell}")
        return cells
    if not args.config:
        raise InputError("simulate needs --table or --config")
    raw = read_config(args.config)
    raw = raw.get("simulate", raw)
    raw.setdefault("base_seed", args.seed)
    if args.reps:
        raw["replications"] = args.reps
    try:
        return [SimConfig.from_dict(raw)]
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid simulation config: {exc}") from None


def cmd_simulate(args):
    cells = simulate_configs(args)
    man = manifest_for(args, _inputs(args))
    os.makedirs(args.out, exist_ok=True)
    table_rows = []
    failed = False
    for cfg in cells:
        try:
            rep = run_study(cfg, workers=args.threads)
        except StudyFailedError as exc:
            rep = exc.report
            failed = True
        stem = _cell_stem(cfg)
        man.timings[stem] = rep.runtime_seconds
        csv_path, json_path = rep.write(args.out, stem)
        stamp_csv(csv_path, man)
        with open(json_path) as fh:
            payload = json.load(fh)
        write_json(json_path, payload, man)
        for metric, param, value in rep.rows:
            table_rows.append((cfg.n, cfg.T, cfg.d, cfg.kappa, metric, param, value))
        print(f"{stem}: {rep.replications_used} replications used, {rep.failures} failed, "
              f"{rep.runtime_seconds:.1f}s")
    table_path = os.path.join(args.out, f"table{args.table or 'config'}.csv")
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "T", "d", "kappa", "metric", "parameter", "value"])
        for row in table_rows:
            w.writerow(list(row[:6]) + [repr(float(row[6]))])
    stamp_csv(table_path, man)
    if str(args.table) == "3":
        _write_power_curves(os.path.join(args.out, "power.dat"), table_rows)
    man.write(args.out)
    if failed:
        raise NonConvergenceError("more than 5% of replications failed in at least one cell")
    return EXIT_OK


def _write_power_curves(path, rows):
    """Gnuplot-ready ``n T kappa rate`` blocks, one per (n, T)."""
    with open(path, "w") as fh:
        fh.write("# n T kappa rejection_rate\n")
        last = None
        for n, T, _, kappa, metric, _, value in rows:
            if metric != "rejection_rate":
                continue
            if last is not None and last != (n, T):
                fh.write("\n\n")
            fh.write(f"{n} {T} {kappa:g} {value!r}\n")
            last = (n, T)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_inputs(p, model=True):
    p.add_argument("--y", required=True, help="wide response CSV (one row per period)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights", help="directory of W_k{k}_t{t}.csv files")
    src.add_argument("--attributes", help="long attribute CSV (k,t,i,value)")
    p.add_argument("--discrete", nargs="*", default=(), help="attribute labels treated as discrete")
    p.add_argument("--density", type=float, default=None, help="target weight density (default 10/n)")
    p.add_argument("--feasibility", choices=FEASIBILITY_MODES, default="l1")
    p.add_argument("--se", choices=("sandwich", "information"), default="sandwich")
    p.add_argument("--out", default=".", help="output directory")
    if model:
        p.add_argument("--model", choices=MODELS, default="basic")
        p.add_argument("--x", help="long covariate CSV (k,t,i,value)")
        p.add_argument("--z", help="long endogenous-attribute CSV (k,t,i,value)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mirmodel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=20240101, help="base seed")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker/BLAS threads (default ${THREADS_ENV} or all cores)")
    parser.add_argument("--config", help="TOML or JSON file with option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate a model")
    _add_inputs(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="EBIC weight-matrix selection")
    _add_inputs(p, model=False)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--qmax", type=int, default=None)
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("test", help="influence-matrix adequacy test")
    _add_inputs(p, model=False)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--variance-form", choices=VARIANCE_FORMS, default="exact")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--table", choices=("1", "2", "3", "4", "S9"), default=None)
    p.add_argument("--cell", help="restrict a preset, e.g. n=25,T=25,d=2")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults from the ``[<subcommand>]`` section of --config."""
    args = parser.parse_args(argv)
    if not args.config or args.command == "simulate":
        return args
    raw = read_config(args.config)
    section = raw.get(args.command, raw)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(section) - known - {"fit", "select", "test", "simulate"}
    if unknown:
        raise InputError(f"{args.config}: unknown keys {sorted(unknown)}")
    sub.set_defaults(**{k: v for k, v in section.items() if k in known})
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    try:
        if args.command == "simulate":
            return args.func(args)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (InputError, WeightConstructionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TestPreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except NonConvergenceError as exc:
        print(f"error: not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
