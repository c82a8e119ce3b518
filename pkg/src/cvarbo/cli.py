"""Command-line experiment runner.

    cvarbo run <config-file> [--output DIR] [--jobs K] [--seed S]
    cvarbo list-problems
    cvarbo summarize <trace-dir>

Exit codes: 0 on full success, 1 if any run failed, 2 on config errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .harness import (
    SUMMARY_COLUMNS,
    ConfigError,
    parse_config,
    replicate_seed,
    run_experiment,
    summarize_traces,
)
from .optimizer import METHODS
from .problems import problem_defaults, problem_names


def _cmd_run(args) -> int:
    try:
        spec = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        runs = []
        for cfg in spec.runs:
            # recompute each replicate's seed from the new master seed
            rep = next(
                i for i in range(spec.replicates)
                if replicate_seed(spec.master_seed, i) == cfg.seed
            )
            runs.append(replace(cfg, seed=replicate_seed(args.seed, rep)))
        spec = replace(spec, master_seed=args.seed, runs=tuple(runs))
    rows, failures = run_experiment(spec, output_dir=args.output, jobs=args.jobs)
    for row in rows:
        print(row.as_csv())
    if failures:
        for method, seed, err in failures:
            print(f"FAILED {method} seed={seed}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_list_problems(_args) -> int:
    print(f"{'name':<12} {'r_min':>8} {'alpha':>8} {'default n_iter':>15}")
    for name in problem_names():
        d = problem_defaults(name)
        r_min = "-" if d.r_min is None else f"{d.r_min:g}"
        print(f"{name:<12} {r_min:>8} {d.alpha:>8g} {d.n_iter:>15}")
    print(f"\nmethods: {', '.join(METHODS)}")
    return 0


def _cmd_summarize(args) -> int:
    try:
        rows = summarize_traces(args.trace_dir)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(",".join(SUMMARY_COLUMNS))
    for row in rows:
        print(row.as_csv())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cvarbo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="experiment config file")
    p_run.add_argument("--output", default=None, help="output directory")
    p_run.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.set_defaults(fn=_cmd_run)

    p_list = sub.add_parser("list-problems", help="list registered problems")
    p_list.set_defaults(fn=_cmd_list_problems)

    p_sum = sub.add_parser("summarize", help="recompute a summary from trace files")
    p_sum.add_argument("trace_dir", help="experiment output (or traces/) directory")
    p_sum.set_defaults(fn=_cmd_summarize)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
