"""Command-line entry point: train, predict, eval, benchmark and verify."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import modelfile, verify
from .data import DataError, load_csv, load_named, make_splits
from .metrics import evaluate
from .network import predict
from .sep import SepConfig
from .trainer import TrainConfig, TrainingAborted, train

logger = logging.getLogger("sepdgp")

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE, EXIT_ABORTED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting, so exit codes stay ours."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _fmt(x):
    return f"{float(x):.17g}"


def _write_csv(path, header, rows):
    out = sys.stdout if str(path) == "-" else open(path, "w", newline="",
                                                   encoding="utf-8")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()


# -- train -------------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            architecture=args.arch, minibatch_size=args.minibatch,
            iterations=args.iters, learning_rate=args.lr, seed=args.seed,
            sep=SepConfig(parallel_within_minibatch=not args.serial))
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_train(args):
    cfg = _train_config(args)
    ds = load_csv(args.data, args.target)
    if cfg.arch.layer_sizes[0][1] > ds.N:
        raise UsageError(f"first layer needs at most N={ds.N} inducing points")
    model, state, history = train(ds.X, ds.y, cfg)
    metadata = {"seed": cfg.seed, "iterations": cfg.iterations,
                "config_hash": cfg.hash(), "config": cfg.to_dict()}
    modelfile.save(args.out, model, state, str(cfg.arch), metadata)
    hist_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    history.to_csv(hist_path)
    logger.info("wrote %s and %s", args.out, hist_path)
    return EXIT_OK


# -- predict / eval ----------------------------------------------------------

def _load_for_prediction(args):
    model, state, _, _ = modelfile.load(args.model)
    ds = load_csv(args.data, args.target)
    if ds.D != model.input_dim:
        raise UsageError(f"data has {ds.D} input columns, model expects "
                         f"{model.input_dim}")
    return model, state, ds


def cmd_predict(args):
    model, state, ds = _load_for_prediction(args)
    pred = predict(model, state, ds.X)
    rows = [[_fmt(v) for v in x] + [_fmt(m), _fmt(v)]
            for x, m, v in zip(ds.X, pred.mean, pred.variance)]
    _write_csv(args.out, list(ds.column_names) + ["mean", "variance"], rows)
    return EXIT_OK


def cmd_eval(args):
    model, state, ds = _load_for_prediction(args)
    pred = predict(model, state, ds.X)
    report = evaluate(pred.mean, pred.variance, ds.y)
    _write_csv(args.out, ["rmse", "mll", "n_test"],
               [[_fmt(report.rmse), _fmt(report.mll), report.n_test]])
    return EXIT_OK


# -- benchmark ---------------------------------------------------------------

def load_benchmark_spec(path):
    """Read a benchmark spec (JSON) and fill in defaults."""
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read benchmark spec {path}: {exc}")
    if not isinstance(spec, dict) or "datasets" not in spec \
            or "architectures" not in spec:
        raise UsageError("benchmark spec needs 'datasets' and 'architectures'")
    spec.setdefault("n_splits", 20)
    spec.setdefault("train_fraction", 0.9)
    spec.setdefault("seed", 0)
    spec.setdefault("train", {})
    return spec


def run_benchmark(spec, n_splits, data_root=None, progress=None):
    """Train and evaluate every (dataset, architecture, split) cell.

    Split ``i`` of a dataset trains with seed ``seed + i``; failed cells are
    logged and recorded as NaN.
    """
    rows = []
    for name in spec["datasets"]:
        ds = load_named(name, data_root)
        splits = make_splits(ds, n_splits, spec["train_fraction"], spec["seed"])
        for arch in spec["architectures"]:
            rmses, mlls = [], []
            for i, (tr, te) in enumerate(splits):
                cfg = TrainConfig(**{**spec["train"], "architecture": arch,
                                     "seed": spec["seed"] + i})
                try:
                    model, state, _ = train(ds.X[tr], ds.y[tr], cfg)
                    pred = predict(model, state, ds.X[te])
                    rep = evaluate(pred.mean, pred.variance, ds.y[te])
                    rmse, mll = rep.rmse, rep.mll
                except (TrainingAborted, ArithmeticError, ValueError,
                        np.linalg.LinAlgError) as exc:
                    logger.error("%s %s split %d failed: %s", name, arch, i, exc)
                    rmse = mll = math.nan
                rmses.append(rmse)
                mlls.append(mll)
                if progress:
                    progress(name, arch, i, rmse, mll)
            r, m = np.array(rmses), np.array(mlls)
            rows.append({"dataset": name, "N": ds.N, "D": ds.D, "arch": arch,
                         "rmse_mean": r.mean(), "rmse_std": r.std(),
                         "mll_mean": m.mean(), "mll_std": m.std(),
                         "rmse": rmses, "mll": mlls})
    return rows


BENCH_COLUMNS = ["dataset", "N", "D", "arch", "rmse_mean", "rmse_std",
                 "mll_mean", "mll_std"]


def cmd_benchmark(args):
    spec = load_benchmark_spec(args.spec)
    n_splits = spec["n_splits"] if args.full else args.splits

    def progress(name, arch, i, rmse, mll):
        logger.info("%s %s split %d: rmse %.4g mll %.4g", name, arch, i,
                    rmse, mll)

    rows = run_benchmark(spec, n_splits, progress=progress)
    _write_csv(args.out, BENCH_COLUMNS,
               [[r["dataset"], r["N"], r["D"], r["arch"]]
                + [_fmt(r[k]) for k in BENCH_COLUMNS[4:]] for r in rows])
    return EXIT_OK


# -- verify ------------------------------------------------------------------

def cmd_verify(args):
    results = verify.run_all(args.seed, args.quick, args.inject_psi1_fault,
                             progress=lambda s: logger.info("suite %s", s))
    failed = [r for r in results if not r.passed]
    for suite in verify.SUITES:
        rs = [r for r in results if r.suite == suite]
        bad = [r for r in rs if not r.passed]
        worst = max((r.statistic for r in rs), default=float("nan"))
        print(f"{suite:10s} {'FAIL' if bad else 'ok':4s} "
              f"{len(rs) - len(bad)}/{len(rs)} passed, worst {worst:.3g}")
    if args.report:
        verify.write_report(results, args.report)
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


# -- wiring ------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="sepdgp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a CSV file")
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="-1",
                   help="target column name or index (default: last)")
    p.add_argument("--arch", default="y@50")
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--minibatch", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", help="history CSV (default: next to --out)")
    p.add_argument("--serial", action="store_true",
                   help="no threads within a minibatch")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
            ("predict", cmd_predict, "predictive means and variances"),
            ("eval", cmd_eval, "RMSE and mean log density on labelled data")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--target", default="-1")
        p.add_argument("--out", default="-")
        p.set_defaults(func=func)

    p = sub.add_parser("benchmark", help="UCI-style split benchmark")
    p.add_argument("spec", help="benchmark spec (JSON)")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--full", action="store_true",
                   help="use the spec's n_splits (default 20)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("verify", help="run the oracle verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--report", help="CSV report path")
    p.add_argument("--inject-psi1-fault", type=float, default=0.0,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sepdgp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, modelfile.ModelFileError) as exc:
        print(f"sepdgp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"sepdgp {args.command}: training aborted: {exc}",
              file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
