"""Command line: ``run`` experiments, ``check`` the protocol, ``report`` a CSV."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .checker import BINARY_3, BINARY_7, enumerate_and_check
from .fault_injection import PercolationMode
from .harness import (
    SCHEDULERS,
    ExperimentConfig,
    OracleMismatch,
    format_table,
    read_csv,
    run_experiment,
    summarize,
)
from .kernels import KERNELS, KernelSpec


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")


def _schedulers(text: str) -> tuple[str, ...]:
    names = tuple(x.strip() for x in text.split(",") if x.strip())
    for n in names:
        if n not in SCHEDULERS:
            raise argparse.ArgumentTypeError(f"unknown scheduler {n!r} (choose from {', '.join(SCHEDULERS)})")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resilient-ws",
        description="Resilient work-stealing fork/join runtime: experiments and protocol checks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV + JSON results")
    run.add_argument("--kernel", choices=KERNELS, required=True)
    run.add_argument("--scheduler", type=_schedulers, default=("cobra",),
                     help="cobra, baseline, or both as 'cobra,baseline'")
    run.add_argument("--threads", type=_int_list, default=(1,), help="worker counts, e.g. 1,2,4,8")
    run.add_argument("--failures", type=_int_list, default=(0,), help="failure counts, e.g. 0,1,10")
    run.add_argument("--percolation", choices=("best", "worst"), default="best")
    run.add_argument("--reps", type=int, default=30)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, default=Path("results/experiment.csv"))
    run.add_argument("--calibration-runs", type=int, default=5)
    run.add_argument("--size", type=int, help="elements (qsort/map/reduce)")
    run.add_argument("--cutoff", type=int, help="sequential cutoff (qsort/map/reduce)")
    run.add_argument("--num-trees", type=int, help="successive trees (treegen)")
    run.add_argument("--depth", type=int, help="tree depth (treegen)")
    run.add_argument("--fanout", type=int, help="children per node (treegen)")
    run.add_argument("--leaf-work", type=int, help="work units per leaf (treegen)")

    chk = sub.add_parser("check", help="run the interleaving checker suite")
    chk.add_argument("--max-states", type=int, default=10_000_000,
                     help="state bound for the 3-worker, 7-node configuration")
    chk.add_argument("--quick", action="store_true", help="skip the 3-worker, 7-node configuration")

    rep = sub.add_parser("report", help="recompute and print summary tables from a CSV")
    rep.add_argument("csv", type=Path)
    return parser


def _kernel_spec(args: argparse.Namespace) -> KernelSpec:
    changes = {
        name: getattr(args, name)
        for name in ("size", "cutoff", "num_trees", "depth", "fanout", "leaf_work")
        if getattr(args, name) is not None
    }
    return KernelSpec(args.kernel, seed=args.seed, **changes)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = ExperimentConfig(
            kernel=_kernel_spec(args),
            schedulers=args.scheduler,
            workers=args.threads,
            failures=args.failures,
            percolation=PercolationMode.parse(args.percolation),
            reps=args.reps,
            seed=args.seed,
            out=args.out,
            calibration_runs=args.calibration_runs,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(cfg)
    except OracleMismatch as exc:
        print(f"FAILED: {exc}", file=sys.stderr)
        return 1
    print(format_table(report))
    print(f"\nwrote {cfg.out} and {cfg.out.with_suffix('.json')}")
    return 0


def check_suite(max_states: int = 10_000_000, quick: bool = False):
    """(label, verdict, expect_pass) for each configuration of the protocol check."""
    cases = [
        ("2 workers, 3 nodes, 0 faults", dict(shape=BINARY_3, workers=2, fault_budget=0), True),
        ("2 workers, 3 nodes, 1 fault", dict(shape=BINARY_3, workers=2, fault_budget=1), True),
        ("2 workers, 3 nodes, 1 fault, worst case",
         dict(shape=BINARY_3, workers=2, fault_budget=1, percolation=PercolationMode.WORST_CASE), True),
        ("mutant without publication order",
         dict(shape=BINARY_3, workers=2, fault_budget=1, publication_order=False, search="bfs"), False),
    ]
    if not quick:
        cases.append(
            ("3 workers, 7 nodes, 0 faults",
             dict(shape=BINARY_7, workers=3, fault_budget=0, max_states=max_states), True)
        )
    for label, kw, expect in cases:
        t0 = time.perf_counter()
        verdict = enumerate_and_check(**kw)
        yield label, verdict, expect, time.perf_counter() - t0


def cmd_check(args: argparse.Namespace) -> int:
    ok = True
    for label, verdict, expect, secs in check_suite(args.max_states, args.quick):
        good = verdict.passed == expect
        ok &= good
        tag = "ok" if good else "UNEXPECTED"
        print(f"[{tag}] {label} ({secs:.1f}s, expected {'pass' if expect else 'counterexample'})")
        print("  " + verdict.summary().replace("\n", "\n  "))
    return 0 if ok else 1


def cmd_report(args: argparse.Namespace) -> int:
    records = read_csv(args.csv)
    print(format_table(summarize(records)))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return {"run": cmd_run, "check": cmd_check, "report": cmd_report}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
