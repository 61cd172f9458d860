import json

import pytest

from resilient_ws import cli
from resilient_ws.fault_injection import PercolationMode
from resilient_ws.harness import (
    ExperimentConfig,
    OracleMismatch,
    derive_seed,
    read_csv,
    relative_performance,
    run_experiment,
    run_once,
    summarize,
)
from resilient_ws.kernels import KernelSpec

TINY = KernelSpec("treegen", num_trees=2, depth=2, fanout=3, leaf_work=300)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(TINY, reps=0)
    with pytest.raises(ValueError):
        ExperimentConfig(TINY, schedulers=("baseline",), failures=(0, 1))
    with pytest.raises(ValueError):
        ExperimentConfig(TINY, schedulers=("tbb",))
    with pytest.raises(ValueError):
        ExperimentConfig(TINY, workers=(0,))


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seeds = {derive_seed(7, w, f, r) for w in range(3) for f in range(3) for r in range(10)}
    assert len(seeds) == 90


def test_single_rep_degenerate_ci(tmp_path):
    cfg = ExperimentConfig(TINY, reps=1, calibration_runs=1, out=tmp_path / "r.csv")
    report = run_experiment(cfg)
    (cell,) = report.cells
    assert cell.n == 1 and len(cell.times) == 1
    assert cell.half_width is None
    assert cell.speedup == 1.0


def test_relative_performance_both_schedulers():
    cfg = ExperimentConfig(TINY, schedulers=("cobra", "baseline"), workers=(1, 2), reps=2, calibration_runs=1)
    report = run_experiment(cfg)
    assert set(report.relative) == {1, 2}
    assert all(f > 0 for f in report.relative.values())
    assert report.relative_geomean is not None
    factors, geo = relative_performance([report, report])
    assert len(factors) == 4 and geo == pytest.approx(report.relative_geomean)


def test_failures_recorded_and_correct(tmp_path):
    cfg = ExperimentConfig(
        TINY.with_(num_trees=1, leaf_work=3000),
        workers=(2,),
        failures=(0, 3),
        percolation=PercolationMode.WORST_CASE,
        reps=3,
        calibration_runs=2,
        out=tmp_path / "x.csv",
    )
    report = run_experiment(cfg)
    cell = report.cell("cobra", 2, 3)
    assert cell.checkpoint == 2.5
    assert all(r.correct for r in report.records)
    rows = read_csv(tmp_path / "x.csv")
    assert len(rows) == 2 + 3 + 3
    assert sum(r.phase == "calibration" for r in rows) == 2


def test_report_recomputes_bit_for_bit(tmp_path):
    out = tmp_path / "e.csv"
    cfg = ExperimentConfig(TINY, workers=(1, 2), failures=(0, 1), reps=3, calibration_runs=2, out=out)
    run_experiment(cfg)
    stored = json.loads(out.with_suffix(".json").read_text())
    again = summarize(read_csv(out)).to_json()
    assert again == stored


def test_same_seed_same_schedules(tmp_path):
    cfg = dict(kernel=TINY, failures=(2,), reps=3, calibration_runs=1, seed=99)
    a = run_experiment(ExperimentConfig(**cfg))
    b = run_experiment(ExperimentConfig(**cfg))
    assert [r.seed for r in a.records] == [r.seed for r in b.records]
    assert [r.correct for r in a.records] == [r.correct for r in b.records]


def test_oracle_mismatch_fails_loudly(monkeypatch):
    from resilient_ws import kernels

    monkeypatch.setattr(kernels.TreegenKernel, "verify", lambda self: False)
    with pytest.raises(OracleMismatch, match="seed="):
        run_experiment(ExperimentConfig(TINY, reps=1, calibration_runs=1))


def test_run_once_escaped_count():
    rec, kernel = run_once(KernelSpec("map", size=2000, cutoff=500), "cobra", 1, 0, PercolationMode.BEST_CASE, seed=1)
    assert rec.correct and rec.escaped == 0


def test_cli_run_and_report(tmp_path, capsys):
    out = tmp_path / "c.csv"
    code = cli.main([
        "run", "--kernel", "treegen", "--num-trees", "2", "--depth", "2", "--fanout", "2",
        "--leaf-work", "200", "--threads", "1,2", "--failures", "0,1", "--reps", "2",
        "--calibration-runs", "1", "--percolation", "worst", "--out", str(out),
    ])
    assert code == 0
    printed = capsys.readouterr().out
    assert "treegen" in printed and out.exists()
    assert cli.main(["report", str(out)]) == 0
    assert "slowdown" in capsys.readouterr().out


def test_cli_baseline_with_failures_rejected(tmp_path, capsys):
    code = cli.main(["run", "--kernel", "map", "--scheduler", "baseline", "--failures", "1",
                     "--out", str(tmp_path / "b.csv")])
    assert code == 2
    assert "not resilient" in capsys.readouterr().err


def test_cli_bad_scheduler():
    with pytest.raises(SystemExit):
        cli.main(["run", "--kernel", "map", "--scheduler", "tbb"])


def test_cli_check_quick(capsys):
    assert cli.main(["check", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.count("[ok]") == 4
