import pytest

from resilient_ws.checker import (
    BINARY_3,
    World,
    enumerate_and_check,
    format_trace,
    replay,
    shape_size,
)
from resilient_ws.fault_injection import PercolationMode
from resilient_ws.task_graph import NodeState


def test_shape_size():
    assert shape_size(()) == 1
    assert shape_size(BINARY_3) == 3
    assert shape_size((((), ()), ((), ()))) == 7


def test_one_worker_sequential():
    v = enumerate_and_check(BINARY_3, workers=1)
    assert v.passed and v.complete
    assert v.exec_counts[("cont", ())] == 1


def test_two_workers_no_faults_each_child_once():
    v = enumerate_and_check(BINARY_3, workers=2)
    assert v.passed and v.complete
    assert v.terminals > 1
    assert v.exec_counts[("task", (0,))] == 1
    assert v.exec_counts[("task", (1,))] == 1


def test_two_workers_one_fault_worst_case():
    v = enumerate_and_check(BINARY_3, workers=2, fault_budget=1, percolation=PercolationMode.WORST_CASE)
    assert v.passed and v.complete, v.summary()


def test_mutant_without_publication_order_is_caught():
    v = enumerate_and_check(BINARY_3, workers=2, fault_budget=1, publication_order=False, search="bfs")
    assert not v.passed
    assert v.counterexample
    assert "reclaim_publish" in format_trace(v.counterexample)


def test_partial_verdict_when_bound_hit():
    v = enumerate_and_check(BINARY_3, workers=2, fault_budget=1, max_states=500)
    assert v.passed and not v.complete
    assert v.states == 500


def test_reduction_preserves_verdict():
    full = enumerate_and_check(BINARY_3, workers=2, reduce=False)
    reduced = enumerate_and_check(BINARY_3, workers=2)
    assert full.passed and reduced.passed
    assert full.terminals >= reduced.terminals > 0


@pytest.mark.parametrize("kw", [dict(workers=4), dict(workers=0)])
def test_rejects_out_of_range_workers(kw):
    with pytest.raises(ValueError):
        enumerate_and_check(BINARY_3, **kw)


def test_rejects_large_tree():
    big = tuple(() for _ in range(12))
    with pytest.raises(ValueError):
        enumerate_and_check(big, workers=1)


def test_snapshot_restore_round_trip():
    w = World(BINARY_3, 2)
    s0 = w.snapshot()
    for _ in range(12):
        w.apply(w.actions(0)[0])
    s1 = w.snapshot()
    w.restore(s0)
    assert w.snapshot() == s0
    w.restore(s1)
    assert w.snapshot() == s1


def test_replay_is_deterministic():
    schedule = [("step", 0, None)] * 6 + [("step", 1, None), ("step", 1, 0)] + [("step", 1, None)] * 4
    a = replay(BINARY_3, 2, schedule)
    b = replay(BINARY_3, 2, schedule)
    assert a.snapshot() == b.snapshot()


def test_replay_stale_fork_is_discarded():
    # Worker 0 claims the root and fails; the super-root reclaims the root
    # and the root's fresh children belong to the new epoch only.
    w = replay(BINARY_3, 1, [("step", 0, None)] * 4)
    root = w.comp.root
    assert root.state is NodeState.BUSY and len(root.children) == 2
    old = list(root.children)
    w.apply(("fault", 0, None))
    while root.version == 0 or w.workers[0].pc[0] != "top":
        w.apply(("step", 0, None))
    assert all(c not in root.children for c in old)
    assert all(c.version == 1 for c in root.children)
