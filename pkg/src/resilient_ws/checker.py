"""Deterministic exploration of worker interleavings on tiny trees.

Virtual workers are real :class:`~resilient_ws.scheduler.WorkerContext`
objects driven one micro-step at a time from a single thread, so the checker
exercises the scheduler's own step code.  The whole world (nodes, working
lists, program counters, task effects) is snapshotted into a hashable tuple
after every step; a depth-first search over (worker, action) choices with a
visited set of state hashes explores every reachable interleaving, with
fault deliveries as extra actions while the fault budget lasts.

Properties checked on every transition:

* node state changes follow the life cycle, and ``INACTIVE -> BUSY`` only
  happens in a reclaim;
* at most one claim per (node, version) epoch;
* versions never decrease and change only in a reclaim step;
* a child still belonging to its parent's epoch has ``version >= parent's``;
* no inactive node sits in a working list, and no node is in two lists;
* a continuation runs only when all children are done;
* a node whose parent check passed was born in the epoch the parent had
  when its state was read (fencing by version);

and at every terminal state (root done): leaf and continuation effects
equal the sequential result, and in worst-case mode any reclaim implies
the root was restarted.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import SimulatedFault
from .fault_injection import PercolationMode
from .scheduler import (
    STEAL,
    TOP,
    Computation,
    SchedulerConfig,
    WorkerContext,
    handle_failure,
)
from .task_graph import LEGAL_TRANSITIONS, NodeHandle, NodeState, StaleEpochError, TaskNode

Shape = tuple  # () is a leaf; a tuple of shapes is an inner node

BINARY_3 = ((), ())
BINARY_7 = (((), ()), ((), ()))


def shape_size(shape: Shape) -> int:
    return 1 + sum(shape_size(s) for s in shape)


def leaves(shape: Shape) -> int:
    return 1 if not shape else sum(leaves(s) for s in shape)


@dataclass(frozen=True)
class ShapeTask:
    """Task of the node at ``path``: forks one child per sub-shape, joins a sum."""

    path: tuple
    shape: Shape
    world: Any = field(compare=False, hash=False)

    def __call__(self, handle: NodeHandle) -> None:
        w = self.world
        w.count("task", self.path)
        if not self.shape:
            w.effects[self.path] = 1
            return
        for i, sub in enumerate(self.shape):
            handle.fork(ShapeTask(self.path + (i,), sub, w))
        handle.join(ShapeContinuation(self.path, len(self.shape), w))


@dataclass(frozen=True)
class ShapeContinuation:
    path: tuple
    arity: int
    world: Any = field(compare=False, hash=False)

    def __call__(self, handle: NodeHandle) -> None:
        w = self.world
        w.count("cont", self.path)
        w.effects[self.path] = sum(w.effects[self.path + (i,)] for i in range(self.arity))


class Violation(AssertionError):
    pass


class World:
    """A computation plus virtual workers, restorable from a snapshot."""

    def __init__(
        self,
        shape: Shape,
        workers: int,
        percolation: PercolationMode = PercolationMode.BEST_CASE,
        publication_order: bool = True,
        reduce: bool = True,
    ) -> None:
        self.shape = shape
        self.reduce = reduce
        self.effects: dict[tuple, int] = {}
        self.counts: dict[tuple, int] = {}
        self.comp = Computation(ShapeTask((), shape, self), percolation)
        config = SchedulerConfig(percolation=percolation, publication_order=publication_order)
        self.workers: list[WorkerContext] = []
        for i in range(workers):
            ctx = WorkerContext(i, self.workers, seed=i, config=config, mailbox=None)
            ctx.backoff = lambda: None
            ctx.reset(self.comp)
            self.workers.append(ctx)
        # Ghost state: version at each node's latest claim, and per worker the
        # parent's reclaim count observed by its pending parent check.
        self.claimed_at: dict[int, int] = {}
        self.observed: list[Optional[int]] = [None] * workers
        self.faults = 0

    def count(self, kind: str, path: tuple) -> None:
        key = (kind, path)
        self.counts[key] = self.counts.get(key, 0) + 1

    @property
    def nodes(self) -> list[TaskNode]:
        return self.comp.arena.nodes

    # -- snapshot / restore ---------------------------------------------

    # Program counters hold nodes and steal snapshots (tuples of nodes); a
    # node is encoded as -(id + 1) since every other pc integer is >= 0.
    @staticmethod
    def _canon(pc: tuple) -> tuple:
        out = []
        for v in pc:
            if type(v) is TaskNode:
                out.append(-v.id - 1)
            elif type(v) is tuple:
                out.append(tuple(-n.id - 1 for n in v))
            else:
                out.append(v)
        return tuple(out)

    def _uncanon(self, pc: tuple) -> tuple:
        if len(pc) == 1:
            return TOP if pc == TOP else STEAL
        objs = self.nodes
        out = [pc[0]]
        for v in pc[1:]:
            t = type(v)
            if t is int and v < 0:
                out.append(objs[-v - 1])
            elif t is tuple:
                out.append(tuple(objs[-i - 1] for i in v))
            else:
                out.append(v)
        return tuple(out)

    def snapshot(self) -> tuple:
        nodes = tuple(
            (
                -1 if n.parent is None else n.parent.id,
                tuple(c.id for c in n.children),
                n.task,
                n.continuation,
                n.state,
                n.version,
                n.reclaims,
                n.birth_reclaims,
            )
            for n in self.nodes
        )
        workers = tuple(
            (
                self._canon(w.pc),
                tuple(n.id for n in w.working_list),
                -1 if w.in_flight is None else w.in_flight.id,
                w.cursor,
                w.idle,
            )
            for w in self.workers
        )
        return (
            nodes,
            workers,
            tuple(sorted(self.effects.items())),
            tuple(sorted(self.counts.items())),
            tuple(sorted(self.claimed_at.items())),
            tuple(self.observed),
            self.faults,
        )

    def restore(self, snap: tuple) -> None:
        nodes, workers, effects, counts, claimed, observed, faults = snap
        arena = self.comp.arena
        if len(arena) > len(nodes):
            arena.truncate(len(nodes))
        while len(arena) < len(nodes):
            arena.new_node(None, None)
        objs = arena.nodes
        for n, (parent, children, task, cont, state, version, reclaims, birth) in zip(objs, nodes):
            n.parent = None if parent < 0 else objs[parent]
            n.children = [objs[c] for c in children]
            n.task = task
            n.continuation = cont
            n.store_state(state)
            n.version = version
            n.reclaims = reclaims
            n.birth_reclaims = birth
        for w, (pc, wl, in_flight, cursor, idle) in zip(self.workers, workers):
            w.pc = self._uncanon(pc)
            w.working_list = [objs[i] for i in wl]
            w.in_flight = None if in_flight < 0 else objs[in_flight]
            w.cursor = cursor
            w.idle = idle
            w.failed_rounds = 0
        self.effects = dict(effects)
        self.counts = dict(counts)
        self.claimed_at = dict(claimed)
        self.observed = list(observed)
        self.faults = faults

    # -- actions -----------------------------------------------------------

    def finished(self) -> bool:
        return self.comp.root.state is NodeState.DONE

    def actions(self, fault_budget: int) -> list[tuple]:
        if self.finished():
            return []
        acts: list[tuple] = []
        n = len(self.workers)
        if self.reduce:
            for w in self.workers:
                if self._local(w):
                    if w.pc == STEAL and n > 1:
                        return [("step", w.id, v) for v in range(n) if v != w.id]
                    return [("step", w.id, None)]
        for w in self.workers:
            if w.pc == STEAL and n > 1:
                acts.extend(("step", w.id, v) for v in range(n) if v != w.id)
            else:
                acts.append(("step", w.id, None))
        if self.faults < fault_budget:
            acts.extend(("fault", w.id, None) for w in self.workers)
        return acts

    @staticmethod
    def _local(w: WorkerContext) -> bool:
        """True when the pending step of ``w`` touches only its private state.

        Such a step commutes with every step of other workers and with fault
        deliveries, so exploring it alone (partial-order reduction) loses no
        reachable state of the shared world.  No cycle consists of local
        steps only, so other workers are never postponed forever.
        """
        pc = w.pc
        label = pc[0]
        if label == "top" or label == "steal_pick":
            return True
        if label == "scan_free" or label == "scan_inactive":
            # The scanned node is held by this worker: its children list
            # is written only by it.
            return pc[2] >= len(pc[1].children)
        return False

    def apply(self, action: tuple) -> None:
        kind, wid, victim = action
        ctx = self.workers[wid]
        before = [(n.state, n.version) for n in self.nodes]
        pc = ctx.pc
        if kind == "fault":
            self.faults += 1
            handle_failure(ctx)
            self.observed[wid] = None
        else:
            if victim is not None:
                ctx.forced_victim = victim
            self._pre_step(ctx, pc)
            ctx.advance()
            self._post_step(ctx, pc)
        self._check_transitions(ctx, pc, before, kind)
        self._check_structure()

    def _pre_step(self, ctx: WorkerContext, pc: tuple) -> None:
        label = pc[0]
        if label == "run_cont":
            node = pc[1]
            if not all(c.state is NodeState.DONE for c in node.children):
                raise Violation(f"continuation of node {node.id} with unfinished children")

    def _post_step(self, ctx: WorkerContext, pc: tuple) -> None:
        label = pc[0]
        wid = ctx.id
        if label == "parent_state" and ctx.pc[0] == "parent_version":
            self.observed[wid] = pc[1].parent.reclaims
        elif label == "parent_version":
            node = pc[1]
            observed, self.observed[wid] = self.observed[wid], None
            if ctx.pc[0] == "scan_free" and observed is not None and observed != node.birth_reclaims:
                raise Violation(
                    f"worker {wid} accepted node {node.id} although its parent "
                    f"{node.parent.id} had been reclaimed when its state was read"
                )
        elif label != "parent_state":
            self.observed[wid] = None

    def _check_transitions(self, ctx: WorkerContext, pc: tuple, before: list, kind: str) -> None:
        for node, (old_state, old_version) in zip(self.nodes, before):
            if node.state is not old_state:
                if (old_state, node.state) not in LEGAL_TRANSITIONS:
                    raise Violation(f"illegal transition {old_state.name}->{node.state.name} on node {node.id}")
                if old_state is NodeState.INACTIVE and pc[0] != "reclaim_publish":
                    raise Violation(f"node {node.id} left INACTIVE outside a reclaim ({pc[0]})")
                if node.state is NodeState.BUSY:
                    last = self.claimed_at.get(node.id)
                    if last is not None and node.version <= last:
                        raise Violation(
                            f"second claim of node {node.id} in epoch {node.version}"
                        )
                    self.claimed_at[node.id] = node.version
            if node.version != old_version:
                if node.version < old_version:
                    raise Violation(f"version of node {node.id} decreased")
                if kind != "step" or pc[0] != "reclaim_version" or pc[1] is not node:
                    raise Violation(f"version of node {node.id} changed outside a reclaim")
        for node in self.nodes[len(before):]:
            if node.state is not NodeState.FREE:
                raise Violation(f"node {node.id} created in state {node.state.name}")

    def _check_structure(self) -> None:
        seen: dict[int, int] = {}
        for w in self.workers:
            for n in w.working_list:
                if n.state is NodeState.INACTIVE:
                    raise Violation(f"inactive node {n.id} in working list of worker {w.id}")
                if n.id in seen:
                    raise Violation(f"node {n.id} in lists of workers {seen[n.id]} and {w.id}")
                seen[n.id] = w.id
        for n in self.nodes:
            p = n.parent
            if p is None or p is self.comp.super_root:
                continue
            if n.birth_reclaims == p.reclaims and n in p.children and n.version < p.version:
                raise Violation(f"valid child {n.id} has version below its parent {p.id}")

    def check_terminal(self, percolation: PercolationMode) -> None:
        expected = leaves(self.shape)
        if self.effects.get(()) != expected:
            raise Violation(f"root effect {self.effects.get(())} != {expected}")
        if self.faults == 0:
            again = sorted(k for k, n in self.counts.items() if n != 1)
            if again or len(self.counts) != 2 * shape_size(self.shape) - leaves(self.shape):
                raise Violation(f"fault-free run did not execute every task exactly once: {again}")
        if percolation is PercolationMode.WORST_CASE:
            restarted = any(n.version > 0 for n in self.nodes if n is not self.comp.root)
            if restarted and self.comp.root.version == 0:
                raise Violation("a subtree was restarted but the failure never reached the root")


@dataclass
class Verdict:
    passed: bool
    complete: bool
    states: int
    transitions: int
    terminals: int
    max_depth: int
    counterexample: Optional[list[tuple]] = None
    message: str = ""
    exec_counts: dict = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        cover = "exhaustive" if self.complete else "partial (bound reached)"
        text = (
            f"{status} [{cover}] states={self.states} transitions={self.transitions} "
            f"terminals={self.terminals} max_depth={self.max_depth}"
        )
        if self.message:
            text += f"\n  {self.message}"
        if self.counterexample is not None:
            text += "\n  counterexample:\n" + format_trace(self.counterexample)
        return text


def format_trace(trace: list[tuple]) -> str:
    lines = []
    for i, (kind, wid, victim, pc) in enumerate(trace):
        what = "deliver-fault" if kind == "fault" else "/".join(str(p) for p in pc)
        if victim is not None:
            what += f" (victim {victim})"
        lines.append(f"    {i:3d}  w{wid}  {what}")
    return "\n".join(lines)


def _describe_pc(pc: tuple) -> tuple:
    return tuple(f"n{p.id}" if isinstance(p, TaskNode) else p for p in pc if not isinstance(p, tuple))


def enumerate_and_check(
    shape: Shape = BINARY_3,
    workers: int = 2,
    max_steps: int = 5000,
    fault_budget: int = 0,
    percolation: PercolationMode = PercolationMode.BEST_CASE,
    max_states: int = 10_000_000,
    publication_order: bool = True,
    search: str = "dfs",
    reduce: bool = True,
) -> Verdict:
    """Explore all interleavings of ``workers`` virtual workers on ``shape``.

    Returns a verdict that is ``complete`` when the search finished without
    hitting ``max_states`` or ``max_steps``.  ``search="bfs"`` finds a
    shortest counterexample at the price of keeping a parent map.
    ``reduce=False`` disables the partial-order reduction of local steps.
    """
    if shape_size(shape) > 12:
        raise ValueError("tree too large for exhaustive checking (max 12 nodes)")
    if not 1 <= workers <= 3:
        raise ValueError("checker supports 1 to 3 workers")
    if search not in ("dfs", "bfs"):
        raise ValueError(f"unknown search {search!r}")
    world = World(shape, workers, percolation, publication_order, reduce)
    if search == "bfs":
        return _bfs(world, max_steps, fault_budget, percolation, max_states)
    initial = world.snapshot()
    visited = {hash(initial)}
    transitions = terminals = max_depth = 0
    complete = True
    path: list[tuple] = []
    stack: list[tuple[tuple, list[tuple], int]] = [(initial, world.actions(fault_budget), 0)]
    exec_counts: collections.Counter = collections.Counter()

    current = initial  # snapshot the world is known to be in
    while stack:
        snap, acts, i = stack[-1]
        if i >= len(acts):
            stack.pop()
            if path:
                path.pop()
            continue
        stack[-1] = (snap, acts, i + 1)
        action = acts[i]
        if current is not snap:
            world.restore(snap)
        current = None
        step = _step_record(world, action)
        try:
            world.apply(action)
            if world.finished():
                world.check_terminal(percolation)
        except AssertionError as exc:
            return Verdict(
                False, complete, len(visited), transitions + 1, terminals, max_depth,
                counterexample=[*path, step], message=str(exc),
            )
        transitions += 1
        new = world.snapshot()
        h = hash(new)
        if h in visited:
            continue
        if len(visited) >= max_states:
            complete = False
            continue
        visited.add(h)
        if world.finished():
            terminals += 1
            for key, n in world.counts.items():
                exec_counts[key] = max(exec_counts[key], n)
            continue
        if len(stack) >= max_steps:
            complete = False
            continue
        path.append(step)
        max_depth = max(max_depth, len(stack))
        stack.append((new, world.actions(fault_budget), 0))
        current = new

    return Verdict(True, complete, len(visited), transitions, terminals, max_depth, exec_counts=dict(exec_counts))


def _step_record(world: World, action: tuple) -> tuple:
    pc = world.workers[action[1]].pc
    return (action[0], action[1], action[2], _describe_pc(pc))


def _bfs(
    world: World, max_steps: int, fault_budget: int, percolation: PercolationMode, max_states: int
) -> Verdict:
    initial = world.snapshot()
    # hash -> (parent hash, step record) for trace reconstruction
    parents: dict[int, tuple[Optional[int], Optional[tuple]]] = {hash(initial): (None, None)}
    frontier = collections.deque([(initial, 0)])
    transitions = terminals = max_depth = 0
    complete = True

    def trace_to(h: Optional[int]) -> list[tuple]:
        out = []
        while h is not None:
            h, step = parents[h]
            if step is not None:
                out.append(step)
        return out[::-1]

    while frontier:
        snap, depth = frontier.popleft()
        world.restore(snap)
        h0 = hash(snap)
        for action in world.actions(fault_budget):
            world.restore(snap)
            step = _step_record(world, action)
            try:
                world.apply(action)
                if world.finished():
                    world.check_terminal(percolation)
            except AssertionError as exc:
                return Verdict(
                    False, complete, len(parents), transitions + 1, terminals, max_depth,
                    counterexample=[*trace_to(h0), step], message=str(exc),
                )
            transitions += 1
            new = world.snapshot()
            h = hash(new)
            if h in parents:
                continue
            if len(parents) >= max_states:
                complete = False
                continue
            parents[h] = (h0, step)
            max_depth = max(max_depth, depth + 1)
            if world.finished():
                terminals += 1
            elif depth + 1 < max_steps:
                frontier.append((new, depth + 1))
            else:
                complete = False
    return Verdict(True, complete, len(parents), transitions, terminals, max_depth)


def replay(
    shape: Shape,
    workers: int,
    actions: list[tuple],
    percolation: PercolationMode = PercolationMode.BEST_CASE,
    publication_order: bool = True,
) -> World:
    """Apply a fixed virtual schedule of ``(kind, worker, victim)`` actions."""
    world = World(shape, workers, percolation, publication_order)
    for action in actions:
        world.apply(tuple(action))
    return world
