"""Command-line interface.

Subcommands: train, sweep, staleness-report, straggler-report, best-config,
validate-trace.  Exit codes: 0 ok, 2 config error, 3 diverged run,
4 trace-validation failure.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config, override
from .harness import run_experiment, sweep
from .results import STATUS_OK
from .staleness import measure_staleness
from .stragglers import ArrivalStats, IterationsCurve, arrival_cdf, best_config, kth_arrival_stats
from .trace import EventTrace, validate_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VALIDATION = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--backend", choices=["sim", "concurrent"], default=None)
    p.add_argument("--out", default=None, help="output directory")


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = override(cfg, "seed", str(args.seed))
    if args.backend is not None:
        cfg = override(cfg, "backend", args.backend)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = run_experiment(cfg, out_dir=args.out or "runs/latest")
    status = out.summary["status"]
    print(
        f"status={status} epochs={out.summary['epochs']} "
        f"train_loss={out.summary['final_train_loss']:.6g} "
        f"test_metric={out.summary['final_test_metric']:.6g} "
        f"staleness_mean={out.summary['staleness_mean']:.3g}"
    )
    return EXIT_OK if status == STATUS_OK else EXIT_DIVERGED


def cmd_sweep(args) -> int:
    cfg = _load(args)
    records = sweep(
        cfg,
        args.param,
        [v.strip() for v in args.values.split(",")],
        restarts=args.restarts,
        out_dir=args.out or "runs/sweep",
    )
    for r in records:
        mark = "*" if r["selected"] else " "
        print(
            f"{mark} {args.param}={r['value']} seed={r['seed']} status={r['status']} "
            f"final={r['final_metric']} epochs_to_converge={r['epochs_to_converge']}"
        )
    return EXIT_OK


def cmd_staleness_report(args) -> int:
    trace = EventTrace.from_jsonl(args.trace)
    stats = measure_staleness(trace)
    if stats.unmatched:
        print(f"warning: {stats.unmatched} unmatched in-flight messages", file=sys.stderr)
    text = stats.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_straggler_report(args) -> int:
    import os

    trace = EventTrace.from_jsonl(args.trace)
    ks = [int(v) for v in args.ks.split(",")]
    stats = kth_arrival_stats(trace, ks)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "kth_stats.csv"), "w") as fh:
        fh.write(stats.to_csv())
    with open(os.path.join(args.out, "cdf.csv"), "w") as fh:
        fh.write("k,time,cum_prob\n")
        for k in ks:
            for t, p in arrival_cdf(stats, k):
                fh.write(f"{k},{t!r},{p!r}\n")
    print(f"wrote kth_stats.csv and cdf.csv to {args.out}")
    return EXIT_OK


def _parse_curve(text: str) -> IterationsCurve:
    ns, its = [], []
    for part in text.split(","):
        n, _, iters = part.partition(":")
        ns.append(int(n))
        its.append(float(iters))
    return IterationsCurve(tuple(ns), tuple(its))


def cmd_best_config(args) -> int:
    import os

    from .builders import build_latency

    cfg = _load(args)
    curve = _parse_curve(args.curve)
    est = best_config(
        args.total, curve, build_latency(cfg), mc_iters=args.mc_iters, seed=cfg.seed
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "best_config.csv"), "w") as fh:
            fh.write(est.to_csv())
    n, b, iters, mean_t, total_t = est.best
    print(f"best: N={n} b={b} iterations={iters:.6g} mean_iter_time={mean_t:.6g} est_total_time={total_t:.6g}")
    return EXIT_OK


def cmd_validate_trace(args) -> int:
    trace = EventTrace.from_jsonl(args.trace)
    problems = validate_trace(trace, args.protocol, args.workers_n, args.shards_m)
    for p in problems:
        print(f"violation: {p}")
    if problems:
        return EXIT_VALIDATION
    print("trace ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    _add_common(p)
    p.add_argument("--param", required=True, help="dotted config key to vary")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--restarts", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("staleness-report", help="per-layer staleness table from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_staleness_report)

    p = sub.add_parser("straggler-report", help="k-th arrival stats and CDFs from a sync trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--ks", required=True, help="comma-separated k values")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_straggler_report)

    p = sub.add_parser("best-config", help="best worker/backup split for a machine budget")
    _add_common(p)
    p.add_argument("--total", type=int, required=True, help="total machines N + b")
    p.add_argument("--curve", required=True, help="N:iterations pairs, e.g. 50:137500,100:76200")
    p.add_argument("--mc-iters", type=int, default=100_000)
    p.set_defaults(func=cmd_best_config)

    p = sub.add_parser("validate-trace", help="check protocol invariants on a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--protocol", choices=["async", "sync", "timeout"], required=True)
    p.add_argument("--workers-n", type=int, required=True)
    p.add_argument("--shards-m", type=int, default=1)
    p.set_defaults(func=cmd_validate_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
