"""Acceptance criteria, one test (and one PASS/FAIL line) per criterion.

Tolerances are pinned here and nowhere else.  These tests run at desk scale
and take tens of minutes in total; the protocol model check alone walks ten
million states.
"""

import numpy as np
import pytest

from resilient_ws.checker import BINARY_3, BINARY_7, enumerate_and_check
from resilient_ws.fault_injection import PercolationMode
from resilient_ws.harness import ExperimentConfig, OracleMismatch, run_experiment
from resilient_ws.kernels import KERNELS, KernelSpec, make_kernel
from resilient_ws.poison_store import AccessTrace, PoisonableStore, check_idempotence
from resilient_ws.scheduler import CobraScheduler
from resilient_ws.stats import checkpoint_model, ci_overlap, geo_mean

pytestmark = pytest.mark.slow

MODES = (PercolationMode.BEST_CASE, PercolationMode.WORST_CASE)
THREADS = (1, 2, 4, 8)

# Desk-scale inputs: 10^5-element arrays, treegen at ~10^7 work units.
DESK = {
    "qsort": KernelSpec("qsort", size=100_000),
    "map": KernelSpec("map", size=100_000),
    "reduce": KernelSpec("reduce", size=100_000),
    "treegen": KernelSpec("treegen", num_trees=1, depth=4, fanout=4, leaf_work=39_063),
}

# Equal total work (~10^7 units) split over 1, 100 and 1000 trees.
GRANULARITY = {
    1: KernelSpec("treegen", num_trees=1, depth=4, fanout=4, leaf_work=39_063),
    100: KernelSpec("treegen", num_trees=100, depth=2, fanout=4, leaf_work=6_250),
    1000: KernelSpec("treegen", num_trees=1000, depth=1, fanout=4, leaf_work=2_500),
}

FAULT_WORKERS = 4
MIN_RUNS = 30
CHECK_BOUND = 10_000_000
MIN_SPEEDUP = 2.5


def test_c1_correct_under_failures(verdict_line):
    runs = bad = 0
    errors = []
    for name in KERNELS:
        for mode in MODES:
            cfg = ExperimentConfig(DESK[name], workers=THREADS, failures=(1, 10, 100),
                                   percolation=mode, reps=10, calibration_runs=3, seed=1)
            try:
                report = run_experiment(cfg)
            except OracleMismatch as exc:
                errors.append(str(exc))
                continue
            measured = [r for r in report.records if r.phase == "measure"]
            runs += len(measured)
            bad += sum(not r.correct for r in measured)
    ok = not errors and bad == 0 and runs == len(KERNELS) * 2 * 4 * 3 * 10
    verdict_line(1, ok, f"{runs - bad}/{runs} faulty runs matched the sequential oracle"
                        + (f"; mismatch: {errors[0]}" if errors else ""))
    assert ok


def test_c2_checkpoint_dominance(verdict_line):
    cfg = ExperimentConfig(DESK["treegen"], workers=(FAULT_WORKERS,), failures=(1, 10),
                           percolation=PercolationMode.WORST_CASE, reps=MIN_RUNS, seed=2)
    report = run_experiment(cfg)
    s1 = report.cell("cobra", FAULT_WORKERS, 1)
    s10 = report.cell("cobra", FAULT_WORKERS, 10)
    assert s1.n >= MIN_RUNS and s10.n >= MIN_RUNS
    ok = s1.slowdown < checkpoint_model(1) and s10.slowdown < checkpoint_model(10)
    verdict_line(2, ok, f"slowdown n=1 {s1.slowdown:.3f} (< {checkpoint_model(1)}), "
                        f"n=10 {s10.slowdown:.3f} (< {checkpoint_model(10)}) over {s1.n} runs")
    assert ok


def test_c3_granularity_trend(verdict_line):
    cells = {}
    for trees, spec in GRANULARITY.items():
        cfg = ExperimentConfig(spec, workers=(FAULT_WORKERS,), failures=(10,),
                               percolation=PercolationMode.WORST_CASE, reps=MIN_RUNS, seed=3)
        c = run_experiment(cfg).cell("cobra", FAULT_WORKERS, 10)
        # Slowdown interval: the time CI scaled by the failure-free reference.
        cells[trees] = (c.slowdown, c.half_width / c.t_ff)
    order = sorted(cells)
    ok = all(
        cells[a][0] >= cells[b][0] or ci_overlap(cells[a], cells[b])
        for a, b in zip(order, order[1:])
    )
    text = ", ".join(f"{t} trees {m:.3f}±{h:.3f}" for t, (m, h) in cells.items())
    verdict_line(3, ok, f"non-increasing slowdown: {text}")
    assert ok


def test_c4_failure_free_overhead(verdict_line):
    reports = {}
    for name in KERNELS:
        cfg = ExperimentConfig(DESK[name], schedulers=("cobra", "baseline"), workers=THREADS,
                               reps=10, calibration_runs=2, seed=4)
        reports[name] = run_experiment(cfg)
    factors = [f for r in reports.values() for f in r.relative.values()]
    geo = geo_mean(factors)
    speedups = {n: reports[n].cell("cobra", 4, 0).speedup for n in ("treegen", "map")}
    ok = all(s >= MIN_SPEEDUP for s in speedups.values())
    verdict_line(4, ok, f"relative performance geomean {geo:.3f} over {len(factors)} cells; "
                        + ", ".join(f"{n} 4-worker speedup {s:.2f}x" for n, s in speedups.items())
                        + f" (need >= {MIN_SPEEDUP}x)")
    assert ok


def test_c5_protocol_model_check(verdict_line):
    small = [
        enumerate_and_check(BINARY_3, workers=2, fault_budget=0),
        enumerate_and_check(BINARY_3, workers=2, fault_budget=1),
        enumerate_and_check(BINARY_3, workers=2, fault_budget=1, percolation=PercolationMode.WORST_CASE),
    ]
    large = enumerate_and_check(BINARY_7, workers=3, fault_budget=0, max_states=CHECK_BOUND)
    mutant = enumerate_and_check(BINARY_3, workers=2, fault_budget=1, publication_order=False, search="bfs")
    ok = (
        all(v.passed and v.complete for v in small)
        and large.passed
        and (large.complete or large.states == CHECK_BOUND)
        and not mutant.passed
        and bool(mutant.counterexample)
    )
    verdict_line(5, ok, f"2w/3n exhaustive {[v.states for v in small]} states; "
                        f"3w/7n {large.states} states ({'complete' if large.complete else 'bounded'}); "
                        f"mutant counterexample in {len(mutant.counterexample or [])} steps")
    assert ok


def test_c6_statistics_fidelity(verdict_line):
    g = geo_mean([0.97, 0.97, 0.98, 0.90])
    models = [checkpoint_model(n) for n in (1, 10, 100, 1000)]
    ok = abs(g - 0.95) <= 0.005 and models == [1.5, 6, 51, 501]
    verdict_line(6, ok, f"geo_mean {g:.4f}, checkpoint_model {models}")
    assert ok


def _increment_kernel(store, trace):
    """The deliberate read-modify-write step: x = x + 1 on cell 0."""

    def task(handle):
        with store.tracing(trace):
            store.write(0, store.read(0) + 1)

    return task


def test_c7_idempotence_diagnostics(verdict_line):
    shipped = {}
    for name in KERNELS:
        k = make_kernel(DESK[name].with_(diagnostics=True))
        with CobraScheduler(4) as s:
            k.execute(s.run)
        assert k.verify() and k.traces
        shipped[name] = sum(len(check_idempotence(t)) for t in k.traces)

    store = PoisonableStore(4)
    trace = AccessTrace()
    with CobraScheduler(1) as s:
        s.run(_increment_kernel(store, trace))
    micro = len(check_idempotence(trace))
    ok = all(v == 0 for v in shipped.values()) and micro == 1
    verdict_line(7, ok, f"shipped kernels {shipped}; x = x + 1 micro-kernel {micro}")
    assert ok


def test_c8_poison_semantics(verdict_line):
    spec = DESK["qsort"]
    rewritten = make_kernel(spec)
    # A depth-1 partition cell: poisoned after the root writes it, rewritten on restart.
    rewritten.poison_after("write", rewritten.buffer(1) + 10)
    with CobraScheduler(4) as s:
        rewritten.execute(s.run)
    escaped = make_kernel(spec)
    # An input cell: read once by the root partition and never again.
    escaped.poison_after("read", 17)
    with CobraScheduler(4) as s:
        escaped.execute(s.run)
    ok = (
        rewritten.verify() and rewritten.store.fault_count >= 1 and rewritten.escaped_faults() == 0
        and escaped.verify() and escaped.escaped_faults() == 1
    )
    verdict_line(8, ok, f"rewritten cell: correct={rewritten.verify()} faults={rewritten.store.fault_count} "
                        f"escaped={rewritten.escaped_faults()}; never-read cell: correct={escaped.verify()} "
                        f"escaped={escaped.escaped_faults()}")
    assert ok
    assert np.array_equal(rewritten.output(), np.sort(rewritten.input))
