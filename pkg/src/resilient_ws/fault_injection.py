"""Software fault injection: scheduled failure tokens and percolation modes.

A controller thread sleeps until each scheduled instant, picks a worker at
random and posts a failure token into its mailbox.  Workers poll their
mailbox at scheduler safe points and inside tasks (``safe_point``).

Worst-case percolation is simulated by wrapping the continuation of every
reclaimed node (except the root) so that running it fails the worker again,
which pushes the restart one level up the tree each time.
"""

from __future__ import annotations

import enum
import random
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

from .errors import InjectedFailure

if TYPE_CHECKING:
    from .scheduler import WorkerContext
    from .task_graph import NodeHandle, Task, TaskNode


class PercolationMode(enum.Enum):
    BEST_CASE = "best"
    WORST_CASE = "worst"

    @classmethod
    def parse(cls, text: str) -> PercolationMode:
        text = text.lower()
        for mode in cls:
            if text in (mode.value, mode.name.lower(), mode.name.lower().replace("_", "")):
                return mode
        raise ValueError(f"unknown percolation mode {text!r}")


DELIVERED = "delivered"
FINISHED = "computation-already-finished"
COALESCED = "coalesced"
PENDING = "pending"


@dataclass
class InjectionEvent:
    offset: float
    worker: int
    mode: PercolationMode
    fired_at: Optional[float] = None
    outcome: str = PENDING


class Mailbox:
    """Single-slot failure mailbox; a second token before the first is taken coalesces."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._pending: Optional[InjectionEvent] = None
        self._flag = False

    def post(self, event: Optional[InjectionEvent] = None) -> bool:
        with self._lock:
            if self._flag:
                if event is not None:
                    event.outcome = COALESCED
                return False
            self._flag = True
            self._pending = event
            return True

    def take(self) -> bool:
        # Unlocked fast path: polled at every safe point.
        if not self._flag:
            return False
        with self._lock:
            if not self._flag:
                return False
            self._flag = False
            if self._pending is not None:
                self._pending.outcome = DELIVERED
                self._pending = None
            return True

    def drain(self) -> Optional[InjectionEvent]:
        """Drop an undelivered token, returning its event."""
        with self._lock:
            event, self._pending, self._flag = self._pending, None, False
            return event

    @property
    def pending(self) -> bool:
        return self._flag


@dataclass
class FailureSchedule:
    instants: list[float]
    mode: PercolationMode
    seed: int
    t_ff: float = 0.0

    def __len__(self) -> int:
        return len(self.instants)


def build_schedule(
    n_failures: int, t_ff: float, seed: int, mode: PercolationMode = PercolationMode.BEST_CASE
) -> FailureSchedule:
    """``n_failures`` instants drawn uniformly over ``[0, t_ff]``, sorted."""
    if n_failures < 0:
        raise ValueError("n_failures must be >= 0")
    if t_ff <= 0:
        raise ValueError("t_ff must be positive")
    rng = random.Random(seed)
    instants = sorted(rng.uniform(0.0, t_ff) for _ in range(n_failures))
    return FailureSchedule(instants, mode, seed, t_ff)


class Injector:
    """Controller thread delivering a schedule to a set of workers."""

    def __init__(self, schedule: FailureSchedule, workers: Sequence[WorkerContext]) -> None:
        self.schedule = schedule
        self.workers = workers
        self.rng = random.Random(schedule.seed ^ 0x5EED)
        self.events: list[InjectionEvent] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._t0 = time.perf_counter()
        if not self.schedule.instants:
            return
        self._thread = threading.Thread(target=self._main, name="fault-injector", daemon=True)
        self._thread.start()

    def _main(self) -> None:
        for offset in self.schedule.instants:
            delay = self._t0 + offset - time.perf_counter()
            if delay > 0 and self._stop.wait(delay):
                pass
            worker = self.rng.randrange(len(self.workers))
            event = InjectionEvent(offset, worker, self.schedule.mode)
            self.events.append(event)
            if self._stop.is_set():
                event.outcome = FINISHED
                continue
            event.fired_at = time.perf_counter() - self._t0
            self.workers[worker].mailbox.post(event)

    def stop(self) -> list[InjectionEvent]:
        """End of computation: undelivered and later events become 'finished'."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        for ctx in self.workers:
            event = ctx.mailbox.drain()
            if event is not None:
                event.outcome = FINISHED
        return self.events

    def delivered(self) -> int:
        return sum(e.outcome == DELIVERED for e in self.events)


def run_injector(schedule: FailureSchedule, workers: Sequence[WorkerContext]) -> Injector:
    """Start delivering ``schedule``; call ``stop()`` on the result when the run ends."""
    injector = Injector(schedule, workers)
    injector.start()
    return injector


class FailingContinuation:
    """Continuation wrapper that fails the worker executing it."""

    __slots__ = ("original",)

    def __init__(self, original: Optional[Task]) -> None:
        self.original = original

    def __call__(self, handle: NodeHandle) -> None:
        raise InjectedFailure("worst-case percolation")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FailingContinuation) and other.original == self.original

    def __hash__(self) -> int:
        return hash(("failing", self.original))


def apply_percolation_mode(node: TaskNode, mode: PercolationMode, root: TaskNode) -> None:
    """Called right after ``node`` was reclaimed and its task re-executed."""
    if mode is not PercolationMode.WORST_CASE or node is root:
        return
    node.continuation = FailingContinuation(node.continuation)
