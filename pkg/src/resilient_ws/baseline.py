"""Conventional help-first work stealing over per-worker deques.

Reference scheduler for failure-free timing.  It runs the same kernel
programs (tasks receive a handle with ``fork``/``join``) but has none of the
resilience machinery: a fault raised inside a task aborts the whole run.

Forked children are pushed on the owner's deque; the last child to finish
runs its parent's continuation (join counter), then propagates upwards.
"""

from __future__ import annotations

import random
import threading
import time
from typing import Any, Optional

from . import scheduler as _sched
from .errors import SimulatedFault
from .fault_injection import Mailbox
from .task_graph import ForkJoinUsageError, Task


class BaselineAborted(RuntimeError):
    """The non-resilient baseline met a fault and gave up."""


class AtomicInt:
    """Integer cell with compare-and-set (a lock stands in for the hardware CAS)."""

    __slots__ = ("value", "_lock")

    def __init__(self, value: int = 0) -> None:
        self.value = value
        self._lock = threading.Lock()

    def cas(self, expected: int, new: int) -> bool:
        with self._lock:
            if self.value != expected:
                return False
            self.value = new
            return True

    def add(self, delta: int) -> int:
        with self._lock:
            self.value += delta
            return self.value


EMPTY = object()
ABORT = object()


class WorkDeque:
    """Chase-Lev deque: the owner pushes and pops at the bottom, thieves take the top."""

    def __init__(self, capacity: int = 64) -> None:
        self._buf: list[Any] = [None] * capacity
        self._top = AtomicInt(0)
        self._bottom = 0

    def __len__(self) -> int:
        return max(0, self._bottom - self._top.value)

    def push(self, item: Any) -> None:
        b, t = self._bottom, self._top.value
        buf = self._buf
        if b - t >= len(buf) - 1:
            grown = [None] * (2 * len(buf))
            for i in range(t, b):
                grown[i % len(grown)] = buf[i % len(buf)]
            self._buf = buf = grown
        buf[b % len(buf)] = item
        self._bottom = b + 1

    def pop(self) -> Any:
        b = self._bottom - 1
        self._bottom = b
        t = self._top.value
        if t > b:
            self._bottom = b + 1
            return EMPTY
        item = self._buf[b % len(self._buf)]
        if t == b:
            # Last element: race the thieves for it.
            if not self._top.cas(t, t + 1):
                item = EMPTY
            self._bottom = b + 1
        return item

    def steal(self) -> Any:
        t = self._top.value
        b = self._bottom
        if t >= b:
            return EMPTY
        buf = self._buf
        item = buf[t % len(buf)]
        if not self._top.cas(t, t + 1):
            return ABORT
        return item


class Frame:
    """A spawned task plus the join counter of its children."""

    __slots__ = ("task", "parent", "pending", "continuation")

    def __init__(self, task: Task, parent: Optional[Frame]) -> None:
        self.task = task
        self.parent = parent
        self.pending: Optional[AtomicInt] = None
        self.continuation: Optional[Task] = None


class BaselineHandle:
    """fork/join capability for the baseline; mirrors ``NodeHandle``."""

    __slots__ = ("children", "continuation", "_joined", "_in_continuation")

    def __init__(self, in_continuation: bool = False) -> None:
        self.children: list[Task] = []
        self.continuation: Optional[Task] = None
        self._joined = False
        self._in_continuation = in_continuation

    def fork(self, task: Task) -> None:
        if self._in_continuation:
            raise ForkJoinUsageError("fork called from a continuation")
        self.children.append(task)

    def join(self, continuation: Task) -> None:
        if self._in_continuation:
            raise ForkJoinUsageError("join called from a continuation")
        if self._joined:
            raise ForkJoinUsageError("second join")
        self._joined = True
        self.continuation = continuation


class BaselineWorker:
    def __init__(self, id: int, pool: BaselineScheduler, seed: int) -> None:
        self.id = id
        self.pool = pool
        self.deque = WorkDeque()
        self.rng = random.Random(seed)
        self.mailbox = Mailbox()
        self.executed = 0
        self.steals = 0

    def run_loop(self) -> None:
        # Registering as the current worker makes kernel safe points deliver
        # injected faults here too.
        _sched._current.ctx = self
        pool = self.pool
        misses = 0
        try:
            while not pool.done.is_set():
                frame = self.deque.pop()
                if frame is EMPTY:
                    frame = self._steal()
                    if frame is None:
                        misses += 1
                        if misses >= 64:
                            time.sleep(1e-4 if misses >= 1024 else 0)
                        continue
                misses = 0
                self._execute(frame)
        except BaseException as exc:
            pool.abort(exc)
        finally:
            _sched._current.ctx = None

    def _steal(self) -> Optional[Frame]:
        peers = self.pool.workers
        if len(peers) < 2:
            return None
        v = self.rng.randrange(len(peers) - 1)
        victim = peers[v + 1 if v >= self.id else v]
        item = victim.deque.steal()
        if item is EMPTY or item is ABORT:
            return None
        self.steals += 1
        return item

    def _execute(self, frame: Frame) -> None:
        if self.mailbox.take():
            raise BaselineAborted(f"fault delivered to worker {self.id}")
        handle = BaselineHandle()
        frame.task(handle)
        self.executed += 1
        frame.continuation = handle.continuation
        if handle.children:
            frame.pending = AtomicInt(len(handle.children))
            # Help-first: children go to the deque, first child on top for the owner.
            for task in reversed(handle.children):
                self.deque.push(Frame(task, frame))
        else:
            self._complete(frame)

    def _complete(self, frame: Optional[Frame]) -> None:
        while frame is not None:
            if frame.continuation is not None:
                frame.continuation(BaselineHandle(in_continuation=True))
            parent = frame.parent
            if parent is None:
                self.pool.done.set()
                return
            if parent.pending.add(-1) != 0:
                return
            frame = parent


class BaselineScheduler:
    """Pool of baseline workers; one fork/join tree per :meth:`run` call.

    Threads persist across runs, as in the Cobra pool, so per-tree timing
    does not include thread start-up.
    """

    def __init__(self, workers: int = 1, seed: int = 0) -> None:
        if workers < 1:
            raise ValueError("workers must be >= 1")
        seeds = random.Random(seed)
        self.workers = [BaselineWorker(i, self, seeds.getrandbits(64)) for i in range(workers)]
        self.done = threading.Event()
        self.error: Optional[BaseException] = None
        self._err_lock = threading.Lock()
        self._cond = threading.Condition()
        self._generation = 0
        self._running = 0
        self._shutdown = False
        self._threads: list[threading.Thread] = []

    @property
    def contexts(self) -> list[BaselineWorker]:
        """Workers with their mailboxes, the injector's view of the pool."""
        return self.workers

    def abort(self, exc: BaseException) -> None:
        with self._err_lock:
            if self.error is None:
                self.error = exc
        self.done.set()

    def _thread_main(self, worker: BaselineWorker) -> None:
        seen = 0
        while True:
            with self._cond:
                while self._generation == seen and not self._shutdown:
                    self._cond.wait()
                if self._shutdown:
                    return
                seen = self._generation
            worker.run_loop()
            with self._cond:
                self._running -= 1
                if self._running == 0:
                    self._cond.notify_all()

    def run(self, root_task: Task) -> None:
        self.done.clear()
        self.error = None
        for w in self.workers:
            w.deque = WorkDeque()
        self.workers[0].deque.push(Frame(root_task, None))
        if not self._threads:
            for w in self.workers:
                t = threading.Thread(
                    target=self._thread_main, args=(w,), name=f"baseline-worker-{w.id}", daemon=True
                )
                t.start()
                self._threads.append(t)
        with self._cond:
            self._running = len(self.workers)
            self._generation += 1
            self._cond.notify_all()
            while self._running:
                self._cond.wait()
        if self.error is not None:
            if isinstance(self.error, SimulatedFault):
                raise BaselineAborted(str(self.error)) from self.error
            raise self.error

    def close(self) -> None:
        with self._cond:
            self._shutdown = True
            self._cond.notify_all()
        for t in self._threads:
            t.join()
        self._threads = []

    def __enter__(self) -> BaselineScheduler:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def baseline_run(root_task: Task, workers: int = 1, seed: int = 0) -> None:
    """Run one fork/join tree to completion on a fresh baseline pool."""
    with BaselineScheduler(workers, seed) as pool:
        pool.run(root_task)
