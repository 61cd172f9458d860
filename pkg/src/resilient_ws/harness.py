"""Experiment runner: calibration, repetitions under injected failures, reports.

Every run is checked against the kernel's sequential oracle.  Raw times go
to a CSV file (one row per run, calibration runs included) and derived
statistics to a JSON summary; :func:`summarize` recomputes the statistics
from the rows alone, so ``report`` on a CSV reproduces the summary exactly.

CSV columns:

``phase``         "calibration" (failure-free warm-up) or "measure"
``scheduler``     cobra | baseline
``kernel``        kernel name
``workers``       worker threads
``failures``      failures scheduled for the run
``percolation``   best | worst
``rep``           repetition index within the cell
``seed``          derived per-run seed
``seconds``       wall time of the whole program (all trees)
``t_ff``          failure-free reference time used for the schedule
``correct``       1 when the output matched the oracle
``delivered`` / ``coalesced`` / ``finished``  injection outcomes
``escaped``       poisoned cells left at the end of the run
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import sys
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

from .baseline import BaselineScheduler
from .fault_injection import (
    COALESCED,
    DELIVERED,
    FINISHED,
    PercolationMode,
    build_schedule,
    run_injector,
)
from .kernels import KernelSpec, make_kernel
from .scheduler import CobraScheduler
from .stats import checkpoint_model, geo_mean, mean_ci

log = logging.getLogger(__name__)

SCHEDULERS = ("cobra", "baseline")

CSV_FIELDS = (
    "phase",
    "scheduler",
    "kernel",
    "workers",
    "failures",
    "percolation",
    "rep",
    "seed",
    "seconds",
    "t_ff",
    "correct",
    "delivered",
    "coalesced",
    "finished",
    "escaped",
)


class OracleMismatch(AssertionError):
    """A run produced output different from the sequential oracle."""


@dataclass
class ExperimentConfig:
    kernel: KernelSpec
    schedulers: tuple[str, ...] = ("cobra",)
    workers: tuple[int, ...] = (1,)
    failures: tuple[int, ...] = (0,)
    percolation: PercolationMode = PercolationMode.BEST_CASE
    reps: int = 30
    seed: int = 0
    out: Optional[Path] = None
    calibration_runs: int = 5
    level: float = 0.95
    # Shorter GIL switch interval so the injector thread wakes on time.
    switch_interval: Optional[float] = 1e-4

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.calibration_runs < 1:
            raise ValueError("calibration_runs must be >= 1")
        if not self.schedulers:
            raise ValueError("at least one scheduler is required")
        for s in self.schedulers:
            if s not in SCHEDULERS:
                raise ValueError(f"unknown scheduler {s!r}")
        if "baseline" in self.schedulers and any(f > 0 for f in self.failures):
            raise ValueError("the baseline scheduler is not resilient: failures must be 0")
        if any(w < 1 for w in self.workers):
            raise ValueError("worker counts must be >= 1")
        if any(f < 0 for f in self.failures):
            raise ValueError("failure counts must be >= 0")


@dataclass
class RunRecord:
    phase: str
    scheduler: str
    kernel: str
    workers: int
    failures: int
    percolation: str
    rep: int
    seed: int
    seconds: float
    t_ff: float
    correct: bool
    delivered: int = 0
    coalesced: int = 0
    finished: int = 0
    escaped: int = 0


@dataclass
class CellStats:
    scheduler: str
    kernel: str
    workers: int
    failures: int
    percolation: str
    n: int
    mean: float
    half_width: Optional[float]
    t_ff: float
    slowdown: float
    checkpoint: float
    speedup: Optional[float]
    delivered: int
    escaped: int
    times: list[float] = field(default_factory=list)


@dataclass
class RunReport:
    cells: list[CellStats]
    relative: dict[int, float]
    relative_geomean: Optional[float]
    records: list[RunRecord] = field(repr=False, default_factory=list)

    def cell(self, scheduler: str, workers: int, failures: int) -> CellStats:
        for c in self.cells:
            if (c.scheduler, c.workers, c.failures) == (scheduler, workers, failures):
                return c
        raise KeyError((scheduler, workers, failures))

    def to_json(self) -> dict[str, Any]:
        return {
            "cells": [asdict(c) for c in self.cells],
            "relative_performance": {str(k): v for k, v in sorted(self.relative.items())},
            "relative_geomean": self.relative_geomean,
        }


def derive_seed(master: int, *indices: int) -> int:
    """64-bit seed from the master seed and cell/repetition indices."""
    text = ":".join(str(i) for i in (master, *indices)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@contextlib.contextmanager
def switch_interval(seconds: Optional[float]) -> Iterator[None]:
    if seconds is None:
        yield
        return
    old = sys.getswitchinterval()
    sys.setswitchinterval(seconds)
    try:
        yield
    finally:
        sys.setswitchinterval(old)


def make_pool(scheduler: str, workers: int, seed: int, percolation: PercolationMode):
    if scheduler == "cobra":
        return CobraScheduler(workers, seed=seed, percolation=percolation)
    return BaselineScheduler(workers, seed=seed)


def run_once(
    spec: KernelSpec,
    scheduler: str,
    workers: int,
    n_failures: int,
    percolation: PercolationMode,
    seed: int,
    t_ff: float = 0.0,
    pool: Any = None,
) -> tuple[RunRecord, Any]:
    """Execute one whole program; returns the record and the kernel used."""
    kernel = make_kernel(spec)
    own = pool is None
    if own:
        pool = make_pool(scheduler, workers, seed, percolation)
    try:
        injector = None
        if n_failures:
            schedule = build_schedule(n_failures, t_ff, seed, percolation)
        t0 = time.perf_counter()
        if n_failures:
            injector = run_injector(schedule, pool.contexts)
        try:
            kernel.execute(pool.run)
        finally:
            events = injector.stop() if injector is not None else []
        seconds = time.perf_counter() - t0
    finally:
        if own:
            pool.close()
    record = RunRecord(
        phase="measure",
        scheduler=scheduler,
        kernel=spec.name,
        workers=workers,
        failures=n_failures,
        percolation=percolation.value,
        rep=0,
        seed=seed,
        seconds=seconds,
        t_ff=t_ff,
        correct=kernel.verify(),
        delivered=sum(e.outcome == DELIVERED for e in events),
        coalesced=sum(e.outcome == COALESCED for e in events),
        finished=sum(e.outcome == FINISHED for e in events),
        escaped=kernel.escaped_faults(),
    )
    return record, kernel


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Run every (scheduler, workers, failures) cell of ``cfg``."""
    records: list[RunRecord] = []
    with switch_interval(cfg.switch_interval):
        for si, sched in enumerate(cfg.schedulers):
            for wi, workers in enumerate(cfg.workers):
                pool = make_pool(sched, workers, derive_seed(cfg.seed, si, wi), cfg.percolation)
                try:
                    records.extend(_run_cell_group(cfg, pool, sched, si, wi, workers))
                finally:
                    pool.close()
    report = summarize(records, cfg.level)
    if cfg.out is not None:
        write_csv(records, cfg.out)
        write_summary(report, cfg.out.with_suffix(".json"))
    return report


def _run_cell_group(
    cfg: ExperimentConfig, pool: Any, sched: str, si: int, wi: int, workers: int
) -> list[RunRecord]:
    out: list[RunRecord] = []
    calib: list[float] = []
    for rep in range(cfg.calibration_runs):
        seed = derive_seed(cfg.seed, si, wi, -1, rep)
        rec, _ = run_once(cfg.kernel, sched, workers, 0, cfg.percolation, seed, pool=pool)
        rec.phase, rec.rep = "calibration", rep
        _check(rec)
        out.append(rec)
        calib.append(rec.seconds)
    t_ff = sum(calib) / len(calib)
    for rec in out:
        rec.t_ff = t_ff
    for fi, n in enumerate(cfg.failures):
        for rep in range(cfg.reps):
            seed = derive_seed(cfg.seed, si, wi, fi, rep)
            rec, _ = run_once(cfg.kernel, sched, workers, n, cfg.percolation, seed, t_ff, pool)
            rec.rep = rep
            _check(rec)
            out.append(rec)
        log.info("%s w=%d n=%d done", sched, workers, n)
    return out


def _check(rec: RunRecord) -> None:
    if not rec.correct:
        raise OracleMismatch(
            f"{rec.scheduler}/{rec.kernel} workers={rec.workers} failures={rec.failures} "
            f"percolation={rec.percolation}: output differs from the oracle (seed={rec.seed})"
        )


def summarize(records: Sequence[RunRecord], level: float = 0.95) -> RunReport:
    """Derive every statistic of a report from raw run records."""
    calib: dict[tuple, list[float]] = defaultdict(list)
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        key = (r.scheduler, r.kernel, r.workers, r.percolation)
        if r.phase == "calibration":
            calib[key].append(r.seconds)
        else:
            groups[key + (r.failures,)].append(r)

    cells: list[CellStats] = []
    for (sched, kernel, workers, perc, n), rows in sorted(groups.items()):
        rows.sort(key=lambda r: r.rep)
        times = [r.seconds for r in rows]
        mean, hw = mean_ci(times, level)
        ref = calib.get((sched, kernel, workers, perc))
        t_ff = sum(ref) / len(ref) if ref else rows[0].t_ff
        cells.append(
            CellStats(
                scheduler=sched,
                kernel=kernel,
                workers=workers,
                failures=n,
                percolation=perc,
                n=len(times),
                mean=mean,
                half_width=hw,
                t_ff=t_ff,
                slowdown=mean / t_ff if t_ff > 0 else float("nan"),
                checkpoint=checkpoint_model(n),
                speedup=None,
                delivered=sum(r.delivered for r in rows),
                escaped=sum(r.escaped for r in rows),
                times=times,
            )
        )

    # Speedup: failure-free mean at 1 worker over the mean at w workers.
    by_key = {(c.scheduler, c.kernel, c.percolation, c.workers, c.failures): c for c in cells}
    for c in cells:
        one = by_key.get((c.scheduler, c.kernel, c.percolation, 1, 0))
        if one is not None and c.failures == 0:
            c.speedup = one.mean / c.mean

    # Relative performance: baseline mean over Cobra mean, failure-free.
    relative: dict[int, float] = {}
    for c in cells:
        if c.scheduler == "cobra" and c.failures == 0:
            for b in cells:
                if (b.scheduler, b.kernel, b.workers, b.failures) == ("baseline", c.kernel, c.workers, 0):
                    relative[c.workers] = b.mean / c.mean
    rel_geo = geo_mean(list(relative.values())) if relative else None
    return RunReport(cells, relative, rel_geo, list(records))


def relative_performance(reports: Sequence[RunReport]) -> tuple[list[float], Optional[float]]:
    """Pool the relative factors of several reports (e.g. one per kernel)."""
    factors = [f for r in reports for _, f in sorted(r.relative.items())]
    return factors, (geo_mean(factors) if factors else None)


# -- files --------------------------------------------------------------------


def write_csv(records: Sequence[RunRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            row = asdict(r)
            row["correct"] = int(r.correct)
            row["seconds"] = repr(r.seconds)
            row["t_ff"] = repr(r.t_ff)
            w.writerow(row)


def read_csv(path: Path) -> list[RunRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                RunRecord(
                    phase=row["phase"],
                    scheduler=row["scheduler"],
                    kernel=row["kernel"],
                    workers=int(row["workers"]),
                    failures=int(row["failures"]),
                    percolation=row["percolation"],
                    rep=int(row["rep"]),
                    seed=int(row["seed"]),
                    seconds=float(row["seconds"]),
                    t_ff=float(row["t_ff"]),
                    correct=row["correct"] == "1",
                    delivered=int(row["delivered"]),
                    coalesced=int(row["coalesced"]),
                    finished=int(row["finished"]),
                    escaped=int(row["escaped"]),
                )
            )
    return out


def write_summary(report: RunReport, path: Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")


def format_table(report: RunReport) -> str:
    head = (
        f"{'scheduler':9} {'kernel':8} {'perc':5} {'w':>3} {'n':>4} {'reps':>4} "
        f"{'mean[s]':>10} {'±95%':>9} {'slowdown':>8} {'ckpt':>6} {'speedup':>7} {'escaped':>7}"
    )
    lines = [head, "-" * len(head)]
    for c in report.cells:
        hw = "-" if c.half_width is None else f"{c.half_width:.4f}"
        sp = "-" if c.speedup is None else f"{c.speedup:.2f}"
        lines.append(
            f"{c.scheduler:9} {c.kernel:8} {c.percolation:5} {c.workers:>3} {c.failures:>4} {c.n:>4} "
            f"{c.mean:>10.4f} {hw:>9} {c.slowdown:>8.3f} {c.checkpoint:>6.1f} {sp:>7} {c.escaped:>7}"
        )
    if report.relative:
        rel = ", ".join(f"{w}w: {f:.3f}" for w, f in sorted(report.relative.items()))
        lines.append(f"relative performance (baseline/cobra): {rel}; geomean {report.relative_geomean:.3f}")
    return "\n".join(lines)
