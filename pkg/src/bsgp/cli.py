"""Command-line interface: train, predict, bench, diag.

Exit codes: 0 success, 1 run error, 2 usage error.  The worker count for
``bench`` comes from the BSGP_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import data as data_mod
from .config import config_help, load_config, parse_config
from .errors import DiagnosticUndefinedError
from .experiment import (
    append_rows,
    bench,
    predictive_traces,
    resolve_dataset,
    run_cell,
)
from .predictive import predictive_ensemble
from .sampler import load_samples, rhat, save_samples


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="bsgp",
        description=(
            "Bayesian sparse (deep) Gaussian processes sampled with SGHMC, "
            "plus closed-form baselines and a benchmark harness."
        ),
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one configured cell")
    p_train.add_argument("--config", required=True, help="configuration file")
    p_train.add_argument("--out", help="write the posterior SampleSet here")
    p_train.add_argument("--results", help="append the metrics row to this CSV")

    p_pred = sub.add_parser("predict", help="predict from a saved SampleSet")
    p_pred.add_argument("--samples", required=True, help="SampleSet file from train")
    p_pred.add_argument("--data", required=True, help="CSV of query points")
    p_pred.add_argument("--out", required=True, help="per-point predictive CSV")
    p_pred.add_argument("--paths", type=int, default=10, help="forward paths (deep)")

    p_bench = sub.add_parser("bench", help="loop datasets x folds x models")
    p_bench.add_argument("--config", required=True, help="base configuration file")
    p_bench.add_argument("--out", required=True, help="metrics CSV to append to")
    p_bench.add_argument(
        "--datasets", required=True,
        help="comma list of NAME=SOURCE (e.g. boston=csv:data/boston.csv)",
    )
    p_bench.add_argument("--models", default="bsgp", help="comma list of model names")
    p_bench.add_argument("--depths", default="1", help="comma list of depths")
    p_bench.add_argument("--priors", default="normal", help="comma list of priors")
    p_bench.add_argument(
        "--folds", default="all", help="'all' or comma list of fold indices"
    )

    p_diag = sub.add_parser("diag", help="R-hat of predictive-mean traces")
    p_diag.add_argument("--samples", required=True, help="multi-chain SampleSet file")
    p_diag.add_argument("--points", type=int, default=3, help="test points to trace")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(cfg.echo())
    result = run_cell(cfg)
    if args.out:
        if result.samples is None:
            print(f"note: model {cfg.model.name} keeps no sample set; {args.out} not written")
        else:
            save_samples(args.out, result.samples)
            print(f"wrote {len(result.samples)} samples to {args.out}")
    if args.results:
        append_rows(args.results, [result.row])
    print(",".join(str(result.row[k]) for k in result.row))
    return 0


def _rebuild_fold(cfg):
    ds = resolve_dataset(cfg)
    folds = data_mod.make_folds(ds, cfg.data.folds, cfg.data.seed)
    return ds, folds[cfg.data.fold]


def _cmd_predict(args) -> int:
    samples = load_samples(args.samples)
    echo = samples.meta.get("config")
    if not echo:
        print("error: samples file carries no config echo", file=sys.stderr)
        return 1
    cfg = parse_config(echo)
    _, fold = _rebuild_fold(cfg)
    query = data_mod.load_csv(args.data)
    Xq = fold.standardize_x(query.X)
    ens = predictive_ensemble(
        samples, Xq, n_paths=args.paths, rng_seed=cfg.sampler.rng_seed
    )
    with open(args.out, "w") as fh:
        if ens.kind == "regression":
            fh.write("index,pred_mean,pred_var\n")
            mean_std = ens.means.mean(axis=0)
            var_std = (ens.variances + ens.means**2).mean(axis=0) - mean_std**2
            mean = fold.unstandardize_y(mean_std)
            var = var_std * fold.y_std**2
            for i, (mu, v) in enumerate(zip(mean, var)):
                fh.write(f"{i},{mu:.10g},{v:.10g}\n")
        else:
            fh.write("index,prob\n")
            for i, p in enumerate(ens.probs.mean(axis=0)):
                fh.write(f"{i},{p:.10g}\n")
    print(f"wrote predictions for {Xq.shape[0]} points to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(cfg.echo())
    datasets = []
    for item in args.datasets.split(","):
        name, _, source = item.partition("=")
        if not source:
            source, name = name, name.split(":")[-1]
        datasets.append((source, name))
    if args.folds == "all":
        folds = list(range(cfg.data.folds))
    else:
        folds = [int(f) for f in args.folds.split(",")]
    rows = bench(
        cfg,
        datasets,
        [m.strip() for m in args.models.split(",")],
        [int(d) for d in args.depths.split(",")],
        [p.strip() for p in args.priors.split(",")],
        folds,
        args.out,
    )
    for row in rows:
        print(",".join(str(row[k]) for k in row))
    print(f"appended {len(rows)} rows to {args.out}")
    return 0


def _cmd_diag(args) -> int:
    samples = load_samples(args.samples)
    echo = samples.meta.get("config")
    if not echo:
        print("error: samples file carries no config echo", file=sys.stderr)
        return 1
    cfg = parse_config(echo)
    ds, fold = _rebuild_fold(cfg)
    n_chains = len(set(samples.chain_ids.tolist()))
    if n_chains < 2:
        raise DiagnosticUndefinedError("diag needs at least two chains")
    Xte = fold.standardize_x(ds.X[fold.test_idx])
    pts = Xte[: min(args.points, Xte.shape[0])]
    traces = predictive_traces(samples, pts, rng_seed=cfg.sampler.rng_seed)
    for j, per_point in enumerate(traces):
        print(f"point {j}: rhat = {rhat(per_point):.4f}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "predict": _cmd_predict,
        "bench": _cmd_bench,
        "diag": _cmd_diag,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, DiagnosticUndefinedError) as exc:
        # config/argument problems are usage errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # run errors
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
