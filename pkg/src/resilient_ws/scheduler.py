"""Resilient work-stealing scheduler over an explicit fork/join tree.

Each worker owns a working list of busy nodes and repeatedly inspects them:
drop a node whose parent went inactive or was reclaimed, claim a free child,
reclaim an inactive child, or run the continuation once every child is done.
When nothing in its list can progress it tries to steal a free child from a
random victim's list.  A failure empties the worker's list and marks every
node it held inactive, leaving the restart to whoever holds their parents.

The loop is written as an explicit machine of *micro-steps* (one CAS, one
field write, one task execution per step), kept in ``WorkerContext.pc``.
Threads drive it with :meth:`WorkerContext.run_loop`; the interleaving
checker drives the very same steps one at a time.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .errors import InjectedFailure, SimulatedFault
from .fault_injection import Mailbox, PercolationMode, apply_percolation_mode
from .task_graph import (
    NodeArena,
    NodeState,
    StaleEpochError,
    Task,
    TaskNode,
    run_continuation,
    run_task,
    transition,
)

FREE, BUSY, INACTIVE, DONE = NodeState.FREE, NodeState.BUSY, NodeState.INACTIVE, NodeState.DONE

TOP = ("top",)
STEAL = ("steal_pick",)

_current = threading.local()


def current_worker() -> Optional["WorkerContext"]:
    return getattr(_current, "ctx", None)


def safe_point() -> None:
    """Fault-delivery point callable from inside long-running tasks.

    Raises :class:`InjectedFailure` if a failure token is pending for the
    worker executing the caller.  A no-op outside a worker thread.
    """
    ctx = getattr(_current, "ctx", None)
    if ctx is not None and ctx.mailbox is not None and ctx.mailbox.take():
        raise InjectedFailure(f"worker {ctx.id}")


class Computation:
    """One fork/join tree: its arena, root, and a virtual super-root.

    The super-root is never in a working list.  Worker 0 inspects it like a
    pinned list entry, which is how the root gets claimed initially and
    reclaimed after a failure of the worker holding it.
    """

    def __init__(
        self,
        root_task: Task,
        percolation: PercolationMode = PercolationMode.BEST_CASE,
        record_events: bool = False,
    ) -> None:
        self.arena = NodeArena()
        self.super_root = self.arena.new_node(None, None, state=BUSY)
        self.root = self.arena.new_node(self.super_root, root_task)
        self.super_root.children.append(self.root)
        self.percolation = percolation
        self.error: Optional[BaseException] = None
        self.events: Optional[list[tuple]] = [] if record_events else None

    def finished(self) -> bool:
        return self.root.state is DONE or self.error is not None

    def abort(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc

    def log(self, *event: Any) -> None:
        if self.events is not None:
            self.events.append(event)


def detect_completion(comp: Computation) -> bool:
    return comp.root.state is DONE


@dataclass
class WorkerStats:
    claims: int = 0
    reclaims: int = 0
    continuations: int = 0
    drops: int = 0
    steal_rounds: int = 0
    steals: int = 0
    failed_steal_rounds: int = 0
    rejected_steals: int = 0
    failures: int = 0

    def merge(self, other: WorkerStats) -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))


@dataclass
class SchedulerConfig:
    percolation: PercolationMode = PercolationMode.BEST_CASE
    steal_backoff: int = 64
    # False reproduces a reclaim without the publication barrier (state is
    # made busy before the version bump); only the checker's mutation test
    # uses it.
    publication_order: bool = True
    idle_sleep: float = 1e-4


class WorkerContext:
    """A worker's private scheduling state and its micro-step machine."""

    def __init__(
        self,
        id: int,
        peers: Sequence[WorkerContext],
        seed: int,
        config: Optional[SchedulerConfig] = None,
        mailbox: Optional[Mailbox] = None,
    ) -> None:
        self.id = id
        self.peers = peers
        self.config = config or SchedulerConfig()
        self.rng = random.Random(seed)
        self.mailbox = mailbox
        self.working_list: list[TaskNode] = []
        self.pinned: Optional[TaskNode] = None
        self.in_flight: Optional[TaskNode] = None
        self.cursor = 0
        self.idle = 0
        self.failed_rounds = 0
        self.pc: tuple = TOP
        self.comp: Optional[Computation] = None
        self.stats = WorkerStats()
        self.forced_victim: Optional[int] = None
        self._steps = {
            "top": self._s_top,
            "parent_state": self._s_parent_state,
            "parent_version": self._s_parent_version,
            "scan_free": self._s_scan_free,
            "run_task": self._s_run_task,
            "scan_inactive": self._s_scan_inactive,
            "reclaim_version": self._s_reclaim_version,
            "reclaim_publish": self._s_reclaim_publish,
            "reclaim_reset": self._s_reclaim_reset,
            "check_done": self._s_check_done,
            "run_cont": self._s_run_cont,
            "mark_done": self._s_mark_done,
            "steal_pick": self._s_steal_pick,
            "steal_snapshot": self._s_steal_snapshot,
            "steal_try": self._s_steal_try,
            "steal_validate": self._s_steal_validate,
        }

    # -- lifecycle -------------------------------------------------------

    def reset(self, comp: Computation) -> None:
        self.comp = comp
        self.working_list = []
        self.pinned = comp.super_root if self.id == 0 else None
        self.in_flight = None
        self.cursor = 0
        self.idle = 0
        self.failed_rounds = 0
        self.pc = TOP

    def published_list(self) -> tuple[TaskNode, ...]:
        """What a thief sees of this worker's list: a possibly stale snapshot."""
        return tuple(self.working_list)

    def _inspectable(self) -> list[TaskNode]:
        if self.pinned is None:
            return self.working_list
        return [self.pinned, *self.working_list]

    def _poll(self) -> None:
        if self.mailbox is not None and self.mailbox.take():
            raise InjectedFailure(f"worker {self.id}")

    def _progress(self) -> None:
        self.idle = 0
        self.failed_rounds = 0
        self.pc = TOP

    def _drop(self, node: TaskNode) -> None:
        self.working_list.remove(node)
        self.stats.drops += 1
        self.comp.log("drop", node.id, node.version, self.id)
        self._progress()

    # -- the loop --------------------------------------------------------

    def step(self) -> bool:
        """Perform one micro-step; False once the computation is finished."""
        return self._steps[self.pc[0]](*self.pc[1:])

    def scheduling_step(self) -> bool:
        """Run micro-steps until the loop is back at its top (one loop iteration)."""
        if not self.step():
            return False
        while self.pc is not TOP:
            if not self.step():
                return False
        return True

    def advance(self) -> bool:
        """One micro-step with the failure path applied; False when finished."""
        try:
            return self.step()
        except SimulatedFault:
            handle_failure(self)
        except StaleEpochError:
            self.in_flight = None
            self.pc = TOP
        return True

    def run_loop(self) -> None:
        _current.ctx = self
        comp = self.comp
        try:
            while comp.error is None and self.advance():
                pass
        except BaseException as exc:
            comp.abort(exc)
        finally:
            _current.ctx = None

    # -- micro-steps -----------------------------------------------------

    def _s_top(self) -> bool:
        if self.comp.finished():
            return False
        self._poll()
        seq = self._inspectable()
        if not seq or self.idle >= len(seq):
            self.idle = 0
            self.pc = STEAL
            return True
        pos = self.cursor % len(seq)
        node = seq[pos]
        self.cursor = pos + 1
        self.pc = ("parent_state", node)
        return True

    def _s_parent_state(self, node: TaskNode) -> bool:
        parent = node.parent
        if parent is None or node is self.comp.root:
            self.pc = ("scan_free", node, 0)
        elif parent.state is INACTIVE:
            self._drop(node)
        else:
            self.pc = ("parent_version", node)
        return True

    def _s_parent_version(self, node: TaskNode) -> bool:
        if node.parent.version > node.version:
            self._drop(node)
        else:
            self.pc = ("scan_free", node, 0)
        return True

    def _s_scan_free(self, node: TaskNode, i: int) -> bool:
        children = node.children
        if i >= len(children):
            self.pc = ("scan_inactive", node, 0)
            return True
        self._poll()
        child = children[i]
        if child.state is FREE and transition(child, FREE, BUSY):
            self.in_flight = child
            self.stats.claims += 1
            self.comp.log("claim", child.id, child.version, self.id)
            self.pc = ("run_task", child, False)
        else:
            self.pc = ("scan_free", node, i + 1)
        return True

    def _s_run_task(self, node: TaskNode, reclaimed: bool) -> bool:
        execute_claimed(self, node, reclaimed)
        self._progress()
        return True

    def _s_scan_inactive(self, node: TaskNode, i: int) -> bool:
        children = node.children
        if i >= len(children):
            self.pc = ("check_done", node)
            return True
        child = children[i]
        if child.state is INACTIVE:
            child.reclaims += 1
            if self.config.publication_order:
                self.pc = ("reclaim_version", child)
            else:
                self.pc = ("reclaim_publish", child)
        else:
            self.pc = ("scan_inactive", node, i + 1)
        return True

    def _s_reclaim_version(self, node: TaskNode) -> bool:
        node.version += 1
        if self.config.publication_order:
            self.pc = ("reclaim_publish", node)
        else:
            self.pc = ("reclaim_reset", node)
        return True

    def _s_reclaim_publish(self, node: TaskNode) -> bool:
        # Single claimer: only the worker holding the parent gets here.
        node.store_state(BUSY)
        self.in_flight = node
        if self.config.publication_order:
            self.pc = ("reclaim_reset", node)
        else:
            self.pc = ("reclaim_version", node)
        return True

    def _s_reclaim_reset(self, node: TaskNode) -> bool:
        node.children = []
        node.continuation = None
        self.stats.reclaims += 1
        self.comp.log("reclaim", node.id, node.version, self.id)
        self.pc = ("run_task", node, True)
        return True

    def _s_check_done(self, node: TaskNode) -> bool:
        if node is not self.pinned and all(c.state is DONE for c in node.children):
            self.pc = ("run_cont", node)
        else:
            self.idle += 1
            self.pc = TOP
        return True

    def _s_run_cont(self, node: TaskNode) -> bool:
        if not all(c.state is DONE for c in node.children):
            raise AssertionError(f"continuation of node {node.id} with unfinished children")
        self.comp.log("continuation", node.id, node.version, self.id)
        run_continuation(node, self.comp.arena)
        self.stats.continuations += 1
        self.pc = ("mark_done", node)
        return True

    def _s_mark_done(self, node: TaskNode) -> bool:
        transition(node, BUSY, DONE)
        self.working_list.remove(node)
        self.comp.log("done", node.id, node.version, self.id)
        self._progress()
        return True

    def _s_steal_pick(self) -> bool:
        if self.comp.finished():
            return False
        self._poll()
        if len(self.peers) < 2:
            self._after_failed_round()
            return True
        self.stats.steal_rounds += 1
        if self.forced_victim is not None:
            victim, self.forced_victim = self.forced_victim, None
        else:
            victim = select_victim(self)
        self.pc = ("steal_snapshot", victim)
        return True

    def _s_steal_snapshot(self, victim: int) -> bool:
        snapshot = self.peers[victim].published_list()
        self.pc = ("steal_try", snapshot, 0, 0)
        return True

    def _s_steal_try(self, snapshot: tuple[TaskNode, ...], ni: int, ci: int) -> bool:
        if ni >= len(snapshot):
            self._after_failed_round()
            return True
        node = snapshot[ni]
        children = node.children
        if ci >= len(children):
            self.pc = ("steal_try", snapshot, ni + 1, 0)
            return True
        self._poll()
        child = children[ci]
        if child.state is FREE and transition(child, FREE, BUSY):
            self.in_flight = child
            self.pc = ("steal_validate", node, child, snapshot, ni, ci)
        else:
            self.pc = ("steal_try", snapshot, ni, ci + 1)
        return True

    def _s_steal_validate(
        self, node: TaskNode, child: TaskNode, snapshot: tuple, ni: int, ci: int
    ) -> bool:
        if node.version <= child.version:
            self.stats.steals += 1
            self.comp.log("steal", child.id, child.version, self.id)
            self.pc = ("run_task", child, False)
        else:
            # Child of a superseded epoch: left busy and unowned, it is garbage.
            self.in_flight = None
            self.stats.rejected_steals += 1
            self.comp.log("reject", child.id, child.version, self.id)
            self.pc = ("steal_try", snapshot, ni, ci + 1)
        return True

    def _after_failed_round(self) -> None:
        self.stats.failed_steal_rounds += 1
        self.failed_rounds += 1
        self.idle = 0
        self.pc = TOP
        self.backoff()

    def backoff(self) -> None:
        """Politeness valve for long runs of fruitless steal rounds."""
        f = self.config.steal_backoff
        if self.failed_rounds >= f:
            time.sleep(self.config.idle_sleep if self.failed_rounds >= 16 * f else 0)


def execute_claimed(ctx: WorkerContext, node: TaskNode, reclaimed: bool) -> None:
    """Run the task of a node this worker just claimed, then list the node."""
    comp = ctx.comp
    run_task(node, comp.arena)
    if reclaimed:
        apply_percolation_mode(node, comp.percolation, root=comp.root)
    ctx.in_flight = None
    ctx.working_list.append(node)


def try_free_node(ctx: WorkerContext, node: TaskNode) -> bool:
    """Claim a free node with CAS and execute its task."""
    if not transition(node, FREE, BUSY):
        return False
    ctx.in_flight = node
    ctx.stats.claims += 1
    execute_claimed(ctx, node, reclaimed=False)
    return True


def try_inactive_node(ctx: WorkerContext, node: TaskNode) -> bool:
    """Reclaim an inactive node: bump version, publish busy, reset, re-run."""
    if node.state is not INACTIVE:
        return False
    node.reclaims += 1
    for label in ("reclaim_version", "reclaim_publish", "reclaim_reset"):
        ctx._steps[label](node)
    execute_claimed(ctx, node, reclaimed=True)
    ctx.pc = TOP
    return True


def steal_free_node(victim_node: TaskNode, thief: WorkerContext) -> bool:
    """Steal one free child of ``victim_node`` whose epoch is still current."""
    for child in tuple(victim_node.children):
        if transition(child, FREE, BUSY):
            if victim_node.version <= child.version:
                thief.in_flight = child
                thief.stats.steals += 1
                execute_claimed(thief, child, reclaimed=False)
                return True
            thief.stats.rejected_steals += 1
    return False


def select_victim(ctx: WorkerContext) -> int:
    n = len(ctx.peers)
    if n < 2:
        raise ValueError("no victim available with a single worker")
    victim = ctx.rng.randrange(n - 1)
    return victim + 1 if victim >= ctx.id else victim


def handle_failure(ctx: WorkerContext) -> None:
    """Failure path: every listed (or half-claimed) node becomes inactive.

    No attempt is made to find the node whose execution faulted; the workers
    holding the parents will reclaim and re-execute what was lost.
    """
    held = list(ctx.working_list)
    if ctx.in_flight is not None:
        held.append(ctx.in_flight)
    for node in held:
        if transition(node, BUSY, INACTIVE) and ctx.comp is not None:
            ctx.comp.log("inactive", node.id, node.version, ctx.id)
    ctx.working_list.clear()
    ctx.in_flight = None
    ctx.cursor = 0
    ctx.idle = 0
    ctx.failed_rounds = 0
    ctx.stats.failures += 1
    ctx.pc = TOP


class CobraScheduler:
    """A pool of worker threads running computations one at a time.

    The pool survives across :meth:`run` calls so a program made of many
    successive fork/join trees keeps its workers (and their mailboxes).
    """

    def __init__(
        self,
        workers: int = 1,
        seed: int = 0,
        percolation: PercolationMode = PercolationMode.BEST_CASE,
        config: Optional[SchedulerConfig] = None,
        record_events: bool = False,
    ) -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.config = config or SchedulerConfig(percolation=percolation)
        self.record_events = record_events
        seeds = random.Random(seed)
        self.contexts: list[WorkerContext] = []
        for i in range(workers):
            self.contexts.append(
                WorkerContext(i, self.contexts, seeds.getrandbits(64), self.config, Mailbox())
            )
        self._cond = threading.Condition()
        self._generation = 0
        self._running = 0
        self._shutdown = False
        self._threads: list[threading.Thread] = []
        self.last: Optional[Computation] = None

    @property
    def workers(self) -> int:
        return len(self.contexts)

    def _ensure_threads(self) -> None:
        if self._threads:
            return
        for ctx in self.contexts:
            t = threading.Thread(
                target=self._thread_main, args=(ctx,), name=f"cobra-worker-{ctx.id}", daemon=True
            )
            t.start()
            self._threads.append(t)

    def _thread_main(self, ctx: WorkerContext) -> None:
        seen = 0
        while True:
            with self._cond:
                while self._generation == seen and not self._shutdown:
                    self._cond.wait()
                if self._shutdown:
                    return
                seen = self._generation
            ctx.run_loop()
            with self._cond:
                self._running -= 1
                if self._running == 0:
                    self._cond.notify_all()

    def run(self, root_task: Task) -> Computation:
        """Execute one fork/join tree to completion; returns after all workers quiesce."""
        comp = Computation(root_task, self.config.percolation, self.record_events)
        for ctx in self.contexts:
            ctx.reset(comp)
        self._ensure_threads()
        with self._cond:
            self._running = len(self.contexts)
            self._generation += 1
            self._cond.notify_all()
            while self._running:
                self._cond.wait()
        self.last = comp
        if comp.error is not None:
            raise comp.error
        return comp

    def stats(self) -> WorkerStats:
        total = WorkerStats()
        for ctx in self.contexts:
            total.merge(ctx.stats)
        return total

    def close(self) -> None:
        with self._cond:
            self._shutdown = True
            self._cond.notify_all()
        for t in self._threads:
            t.join()
        self._threads = []

    def __enter__(self) -> CobraScheduler:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def run_computation(
    root_task: Task,
    workers: int = 1,
    seed: int = 0,
    percolation: PercolationMode = PercolationMode.BEST_CASE,
) -> Computation:
    with CobraScheduler(workers, seed, percolation) as sched:
        return sched.run(root_task)
