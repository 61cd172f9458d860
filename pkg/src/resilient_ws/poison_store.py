"""Simulated memory whose cells can be poisoned.

Reading a poisoned cell raises :class:`PoisonFault` instead of returning a
value; writing a cell stores the value and clears its poison bit.  Value and
poison bit change together under the store lock, so a concurrent reader sees
either a fault or a written value.
"""

from __future__ import annotations

import collections
import contextlib
import threading
from typing import Iterator, Optional

import numpy as np

from .errors import PoisonFault

READ = "r"
WRITE = "w"


class AccessTrace:
    """Bounded log of ``(start, stop, kind)`` cell-range accesses for one execution."""

    def __init__(self, maxlen: int = 1 << 16) -> None:
        self.events: collections.deque[tuple[int, int, str]] = collections.deque(maxlen=maxlen)
        self.label: Optional[str] = None

    def record(self, start: int, stop: int, kind: str) -> None:
        self.events.append((start, stop, kind))

    def __len__(self) -> int:
        return len(self.events)


def check_idempotence(trace: AccessTrace) -> list[int]:
    """Cells read by the traced execution before that execution wrote them.

    A read followed by a write of the same cell (``x = x + 1``) is the
    signature of a non-idempotent step.  Cells only read, or written before
    being read, are fine.
    """
    if not trace.events:
        return []
    size = max(stop for _, stop, _ in trace.events)
    written = np.zeros(size, dtype=bool)
    read_first = np.zeros(size, dtype=bool)
    bad = np.zeros(size, dtype=bool)
    for start, stop, kind in trace.events:
        if kind == READ:
            read_first[start:stop] |= ~written[start:stop]
        else:
            bad[start:stop] |= read_first[start:stop]
            written[start:stop] = True
    return np.flatnonzero(bad).tolist()


class PoisonableStore:
    """Array of cells with a parallel poison bit array and a fault counter."""

    def __init__(self, size: int, dtype: type | np.dtype = np.float64, fill=0) -> None:
        self.values = np.full(size, fill, dtype=dtype)
        self._poison = np.zeros(size, dtype=bool)
        self._lock = threading.Lock()
        self._tls = threading.local()
        self.fault_count = 0

    @classmethod
    def from_array(cls, data) -> PoisonableStore:
        data = np.asarray(data)
        store = cls(len(data), dtype=data.dtype)
        store.values[:] = data
        return store

    def __len__(self) -> int:
        return len(self.values)

    def _bounds(self, start: int, stop: int) -> None:
        if not 0 <= start <= stop <= len(self.values):
            raise IndexError(f"cell range [{start}, {stop}) outside store of {len(self.values)}")

    def _trace(self, start: int, stop: int, kind: str) -> None:
        trace = getattr(self._tls, "trace", None)
        if trace is not None:
            trace.record(start, stop, kind)

    @contextlib.contextmanager
    def tracing(self, trace: AccessTrace) -> Iterator[AccessTrace]:
        """Record this thread's accesses into ``trace`` for the ``with`` body."""
        previous = getattr(self._tls, "trace", None)
        self._tls.trace = trace
        try:
            yield trace
        finally:
            self._tls.trace = previous

    def read(self, index: int):
        self._bounds(index, index + 1)
        self._trace(index, index + 1, READ)
        with self._lock:
            if self._poison[index]:
                self.fault_count += 1
                raise PoisonFault(index)
            return self.values[index].item()

    def read_range(self, start: int, stop: int) -> np.ndarray:
        """Copy of cells ``[start, stop)``; faults on the first poisoned cell."""
        self._bounds(start, stop)
        self._trace(start, stop, READ)
        with self._lock:
            hit = np.flatnonzero(self._poison[start:stop])
            if hit.size:
                self.fault_count += 1
                raise PoisonFault(start + int(hit[0]))
            return self.values[start:stop].copy()

    def write(self, index: int, value) -> None:
        self._bounds(index, index + 1)
        self._trace(index, index + 1, WRITE)
        with self._lock:
            self.values[index] = value
            self._poison[index] = False

    def write_range(self, start: int, values) -> None:
        stop = start + len(values)
        self._bounds(start, stop)
        self._trace(start, stop, WRITE)
        with self._lock:
            self.values[start:stop] = values
            self._poison[start:stop] = False

    def poison(self, index: int) -> None:
        self._bounds(index, index + 1)
        with self._lock:
            self._poison[index] = True

    def is_poisoned(self, index: int) -> bool:
        self._bounds(index, index + 1)
        return bool(self._poison[index])

    def poisoned_cells(self) -> list[int]:
        with self._lock:
            return np.flatnonzero(self._poison).tolist()

    def snapshot(self) -> np.ndarray:
        """Raw values, ignoring poison (for oracles and reports)."""
        with self._lock:
            return self.values.copy()
