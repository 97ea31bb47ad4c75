"""Command-line interface: simulate, fit, cv, backtest and gen-data.

Every command is a deterministic function of its input files, flags and
``--seed``. Options may also come from a flat ``key=value`` file passed with
``--config``; flags on the command line take precedence.

Exit codes: 0 success, 2 usage, 3 I/O or parse error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .estimator import ConvergenceError, EstimatorConfig, fit_sparse
from .losses import LossKind
from .model import DataError, DataSet
from .penalties import Family, PenaltySpec
from .portfolio import ESTIMATORS, backtest, log_returns
from .selection import DEFAULT_C_GRID, CvMode, CvPlan, run_cv
from .simulation import Pattern, SimDesign, generate_model, run_batch, sample_data

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_SEED = 20240101

logger = logging.getLogger("sparse_factor")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# parser


def _c_grid(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid c grid: {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"invalid boolean: {text!r}")


def _add_common(sub):
    sub.add_argument("--config", help="key=value file with default options")
    sub.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--verbose", action="store_true")


def _add_estimator(sub, gamma_default=None):
    sub.add_argument("--m", type=int, help="number of factors")
    sub.add_argument("--loss", choices=[k.value for k in LossKind], default="gaussian")
    sub.add_argument("--penalty", choices=[f.value for f in Family], default="scad")
    sub.add_argument("--shape", type=float, help="SCAD a or MCP b")
    sub.add_argument("--gamma", type=float, default=gamma_default)
    sub.add_argument("--grid-size-k", type=int, default=20)
    sub.add_argument("--max-outer-iters", type=int, default=500)
    sub.add_argument("--rel-tol", type=float, default=1e-6)
    sub.add_argument("--psi-min", type=float, default=1e-6)
    sub.add_argument("--zero-tol", type=float, default=1e-6)
    sub.add_argument("--skip-psi-step", type=_bool, nargs="?", const=True, default=False)
    sub.add_argument("--jitter", type=_bool, nargs="?", const=True, default=False)


def _add_cv(sub, mode="kfold"):
    sub.add_argument("--mode", choices=[c.value for c in CvMode], default=mode)
    sub.add_argument("--folds", type=int, default=5)
    sub.add_argument("--train-fraction", type=float, default=0.75)
    sub.add_argument("--c-grid", type=_c_grid, default=DEFAULT_C_GRID,
                     help="comma-separated multipliers c")


def _add_data(sub):
    sub.add_argument("--data", help="input CSV")
    sub.add_argument("--centered", type=_bool, nargs="?", const=True, default=False,
                     help="treat the rows as mean zero (no de-meaning)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-factor",
        description="Sparse factor models with SCAD/MCP penalties.")
    subs = parser.add_subparsers(dest="command", metavar="command")

    sim = subs.add_parser("simulate", help="Monte-Carlo support recovery batch")
    _add_common(sim)
    sim.add_argument("--pattern", choices=[p.value for p in Pattern])
    sim.add_argument("--p", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int, default=1)
    _add_estimator(sim)
    _add_cv(sim)
    sim.add_argument("--out-dir", default=".")

    fit = subs.add_parser("fit", help="fit a sparse factor model to a CSV")
    _add_common(fit)
    _add_data(fit)
    _add_estimator(fit, gamma_default=0.0)
    fit.add_argument("--out", default="fit.json")

    cv = subs.add_parser("cv", help="cross-validate gamma on a CSV")
    _add_common(cv)
    _add_data(cv)
    _add_estimator(cv)
    _add_cv(cv)
    cv.add_argument("--out", default="cv.json")

    bt = subs.add_parser("backtest", help="static GMVP backtest")
    _add_common(bt)
    _add_data(bt)
    _add_estimator(bt)
    _add_cv(bt, mode="timesplit")
    bt.add_argument("--prices", type=_bool, nargs="?", const=True, default=False,
                    help="input holds prices; convert to log returns")
    bt.add_argument("--split", type=int, help="first out-of-sample row")
    bt.add_argument("--estimators", default=",".join(ESTIMATORS))
    bt.add_argument("--out", default="backtest.json")
    bt.add_argument("--out-csv", default=None)

    gen = subs.add_parser("gen-data", help="simulate a dataset with ground truth")
    _add_common(gen)
    gen.add_argument("--pattern", choices=[p.value for p in Pattern])
    gen.add_argument("--p", type=int)
    gen.add_argument("--m", type=int)
    gen.add_argument("--n", type=int)
    gen.add_argument("--out", default="data.csv")
    gen.add_argument("--truth", default=None, help="ground-truth JSON (default: <out>.truth.json)")
    parser.command_parsers = {"simulate": sim, "fit": fit, "cv": cv,
                              "backtest": bt, "gen-data": gen}
    return parser


REQUIRED = {
    "simulate": ("pattern", "p", "m", "n"),
    "fit": ("data", "m"),
    "cv": ("data", "m"),
    "backtest": ("data", "m", "split"),
    "gen-data": ("pattern", "p", "m", "n"),
}


def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            raise SystemExit(EXIT_IO) from None
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser.command_parsers[args.command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - dests - {"config"})
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)  # flags override file values
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s): "
                     + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


# --------------------------------------------------------------------------
# helpers


def _estimator_config(args, gamma=None) -> EstimatorConfig:
    penalty = PenaltySpec(args.penalty, gamma if gamma is not None else (args.gamma or 0.0),
                          args.shape)
    return EstimatorConfig(
        loss=LossKind(args.loss), penalty=penalty, grid_size_k=args.grid_size_k,
        max_outer_iters=args.max_outer_iters, rel_tol=args.rel_tol,
        psi_min=args.psi_min, zero_tol=args.zero_tol, seed=args.seed,
        skip_psi_step=args.skip_psi_step, jitter=args.jitter)


def _cv_plan(args) -> CvPlan:
    return CvPlan(CvMode(args.mode), args.folds, args.train_fraction, args.c_grid, args.seed)


def _write_json(path, obj):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _load(args) -> DataSet:
    return DataSet.from_csv(args.data, centered=args.centered)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    design = SimDesign(args.pattern, args.p, args.m, args.n, args.seed)
    summary = run_batch(design, args.reps, _estimator_config(args), _cv_plan(args),
                        threads=args.threads, gamma=args.gamma)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.rep, r.seed, repr(r.c1), repr(r.c2), repr(r.mse), int(r.converged),
             r.iterations, repr(r.gamma_star), r.error] for r in summary.records]
    _write_csv(out / "replications.csv",
               ["rep", "seed", "c1", "c2", "mse", "converged", "iterations",
                "gamma_star", "error"], rows)
    agg = {k: (_finite(v) if isinstance(v, float) else v)
           for k, v in summary.to_dict().items()}
    agg["config"] = _estimator_config(args).to_dict()
    agg["cv"] = None if args.gamma is not None else {
        "mode": args.mode, "folds": args.folds, "train_fraction": args.train_fraction,
        "c_grid": list(args.c_grid)}
    _write_json(out / "summary.json", agg)
    if not summary.successes:
        print("error: every replication failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_fit(args) -> int:
    data = _load(args)
    result = fit_sparse(data, args.m, _estimator_config(args))
    _write_json(args.out, result.to_dict())
    return EXIT_OK


def cmd_cv(args) -> int:
    data = _load(args)
    report = run_cv(data, args.m, _estimator_config(args), _cv_plan(args), args.threads)
    _write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_backtest(args) -> int:
    data = _load(args)
    if args.prices:
        data = DataSet(log_returns(data.observations), centered=False, columns=data.columns)
    labels = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    reports = backtest(data, args.split, args.m, labels, _estimator_config(args),
                       _cv_plan(args), args.gamma, args.threads)
    _write_json(args.out, [r.to_dict() for r in reports])
    if args.out_csv:
        rows = [[r.estimator_label, "" if r.avg is None else repr(r.avg),
                 "" if r.sd is None else repr(r.sd), "" if r.ir is None else repr(r.ir)]
                for r in reports]
        _write_csv(args.out_csv, ["label", "AVG", "SD", "IR"], rows)
    if all(r.error for r in reports):
        print("error: every estimator failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gendata(args) -> int:
    design = SimDesign(args.pattern, args.p, args.m, args.n, args.seed)
    truth = generate_model(design)
    data = sample_data(truth, args.n, [args.seed, 1])
    _write_csv(args.out, [f"x{j + 1}" for j in range(args.p)],
               [[repr(float(v)) for v in row] for row in data.observations])
    truth_path = args.truth or str(Path(args.out).with_suffix("")) + ".truth.json"
    _write_json(truth_path, {
        "pattern": design.pattern.value, "p": design.p, "m": design.m, "n": design.n,
        "seed": design.seed, "s": truth.s,
        "lambda": truth.params.lam.tolist(), "psi": truth.params.psi.tolist(),
        "support": truth.support.tolist()})
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "cv": cmd_cv,
            "backtest": cmd_backtest, "gen-data": cmd_gendata}


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, ConvergenceError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
