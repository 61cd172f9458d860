import threading

import pytest
from hypothesis import given, strategies as st

from resilient_ws.task_graph import (
    LEGAL_TRANSITIONS,
    ForkJoinUsageError,
    IllegalTransition,
    NodeArena,
    NodeHandle,
    NodeState,
    StaleEpochError,
    fork,
    join,
    run_continuation,
    run_task,
    transition,
)

FREE, BUSY, INACTIVE, DONE = NodeState


def busy_node(version=0):
    arena = NodeArena()
    node = arena.new_node(None, None, version=version, state=BUSY)
    return arena, node


def test_legal_transitions_exact():
    assert LEGAL_TRANSITIONS == {(FREE, BUSY), (BUSY, DONE), (BUSY, INACTIVE), (INACTIVE, BUSY)}


@pytest.mark.parametrize("a", list(NodeState))
@pytest.mark.parametrize("b", list(NodeState))
def test_illegal_pairs_rejected_before_cas(a, b):
    arena = NodeArena()
    node = arena.new_node(None, None, state=a)
    if (a, b) in LEGAL_TRANSITIONS:
        assert transition(node, a, b) is True
        assert node.state is b
    else:
        with pytest.raises(IllegalTransition):
            transition(node, a, b)
        assert node.state is a


def test_transition_free_to_busy():
    arena = NodeArena()
    node = arena.new_node(None, None)
    assert transition(node, FREE, BUSY)
    assert node.state is BUSY


def test_transition_on_done_node_fails():
    arena = NodeArena()
    node = arena.new_node(None, None, state=DONE)
    assert not transition(node, FREE, BUSY)
    assert node.state is DONE


def test_concurrent_claims_exactly_one_wins():
    for _ in range(200):
        arena = NodeArena()
        node = arena.new_node(None, None)
        results = []
        barrier = threading.Barrier(4)

        def claim():
            barrier.wait()
            results.append(transition(node, FREE, BUSY))

        threads = [threading.Thread(target=claim) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == [False, False, False, True]


def test_fork_creates_free_child_with_parent_version():
    arena, node = busy_node(version=0)
    h = NodeHandle(node, arena)
    fork(h, lambda _: None)
    (child,) = node.children
    assert child.state is FREE
    assert child.version == 0
    assert child.parent is node
    assert child.children == [] and child.continuation is None


def test_fork_does_not_run_task():
    arena, node = busy_node()
    ran = []
    NodeHandle(node, arena).fork(lambda _: ran.append(1))
    assert ran == []


def test_fork_after_version_advance_is_discarded():
    arena, node = busy_node(version=0)
    h = NodeHandle(node, arena)
    h.fork(lambda _: None)
    # Reactivation by another worker mid-task: version bump, fresh child list.
    node.version = 1
    node.children = []
    with pytest.raises(StaleEpochError):
        h.fork(lambda _: None)
    assert node.children == []


def test_stale_fork_lands_in_superseded_list():
    arena, node = busy_node()
    h = NodeHandle(node, arena)
    node.children = []  # reactivated while the version bump is not yet visible
    h.fork(lambda _: None)
    assert node.children == []


def test_join_records_without_running():
    arena, node = busy_node()
    ran = []
    join(NodeHandle(node, arena), lambda _: ran.append(1))
    assert ran == []
    run_continuation(node, arena)
    assert ran == [1]


def test_second_join_rejected():
    arena, node = busy_node()
    h = NodeHandle(node, arena)
    h.join(lambda _: None)
    with pytest.raises(ForkJoinUsageError):
        h.join(lambda _: None)


def test_join_from_superseded_epoch_discarded():
    arena, node = busy_node(version=2)
    h = NodeHandle(node, arena)
    node.version = 3
    with pytest.raises(StaleEpochError):
        h.join(lambda _: None)
    assert node.continuation is None


def test_continuation_cannot_fork_or_join():
    arena, node = busy_node()
    node.continuation = lambda h: h.fork(lambda _: None)
    with pytest.raises(ForkJoinUsageError):
        run_continuation(node, arena)


def test_handle_invalid_after_task_returns():
    arena, node = busy_node()
    kept = []
    node.task = kept.append
    run_task(node, arena)
    with pytest.raises(StaleEpochError):
        kept[0].fork(lambda _: None)


def test_qsort_shape_two_forks_one_join():
    arena, node = busy_node()
    calls = []

    class Spy(NodeHandle):
        def fork(self, task):
            calls.append("fork")
            super().fork(task)

        def join(self, cont):
            calls.append("join")
            super().join(cont)

    def qsort_task(h):
        h.fork(lambda _: None)
        h.fork(lambda _: None)
        h.join(lambda _: None)

    qsort_task(Spy(node, arena))
    assert calls == ["fork", "fork", "join"]


def test_no_continuation_is_noop():
    arena, node = busy_node()
    run_continuation(node, arena)


def test_arena_ids_are_indices_and_truncate():
    arena = NodeArena()
    nodes = [arena.new_node(None, None) for _ in range(5)]
    assert [n.id for n in nodes] == list(range(5))
    arena.truncate(2)
    assert len(arena) == 2
    assert arena.new_node(None, None).id == 2


@given(st.lists(st.integers(min_value=0, max_value=20), max_size=30))
def test_children_inherit_version(versions):
    arena = NodeArena()
    for v in versions:
        parent = arena.new_node(None, None, version=v, state=BUSY)
        NodeHandle(parent, arena).fork(lambda _: None)
        assert parent.children[0].version == v >= parent.version
