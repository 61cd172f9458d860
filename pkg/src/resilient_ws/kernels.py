"""Idempotent fork/join benchmark kernels over a poisonable store.

Every kernel keeps its inputs, intermediates and outputs in one
:class:`PoisonableStore` and is written so that any task, re-executed any
number of times (or concurrently with a stale copy of itself), writes the
same values into the same cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Optional

import numpy as np

from .poison_store import AccessTrace, PoisonableStore
from .scheduler import safe_point
from .task_graph import NodeHandle, Task

KERNELS = ("qsort", "map", "reduce", "treegen")

DEFAULT_CUTOFF = {"qsort": 2048, "map": 4096, "reduce": 4096, "treegen": 0}


@dataclass(frozen=True)
class KernelSpec:
    name: str = "qsort"
    size: int = 100_000
    cutoff: Optional[int] = None
    num_trees: int = 1
    depth: int = 4
    fanout: int = 4
    leaf_work: int = 10_000
    seed: int = 0
    # qsort only: "buffered" (one buffer per recursion depth) or "inplace".
    variant: str = "buffered"
    # map only: "poly" or "identity".
    map_fn: str = "poly"
    diagnostics: bool = False

    def __post_init__(self) -> None:
        if self.name not in KERNELS:
            raise ValueError(f"unknown kernel {self.name!r}")
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", DEFAULT_CUTOFF[self.name])
        if self.name == "treegen" and self.num_trees < 1:
            raise ValueError("treegen needs num_trees >= 1")

    def with_(self, **changes: Any) -> KernelSpec:
        return replace(self, **changes)


class Kernel:
    """Base class: a store, a sequence of root tasks, an output and an oracle."""

    dtype: Any = np.float64

    def __init__(self, spec: KernelSpec) -> None:
        self.spec = spec
        self.traces: list[AccessTrace] = []
        self._hooks: dict[tuple[str, int], int] = {}
        self.store = self._build_store()

    def _build_store(self) -> PoisonableStore:
        raise NotImplementedError

    def trees(self) -> Iterator[Task]:
        raise NotImplementedError

    def output(self) -> np.ndarray:
        raise NotImplementedError

    def oracle(self) -> np.ndarray:
        raise NotImplementedError

    def execute(self, run: Callable[[Task], Any]) -> None:
        for root in self.trees():
            run(root)

    def verify(self) -> bool:
        out, ref = self.output(), self.oracle()
        return out.shape == ref.shape and bool(np.array_equal(out, ref))

    def escaped_faults(self) -> int:
        return len(self.store.poisoned_cells())

    def tree_count(self) -> int:
        return 1

    # -- store access with diagnostics and targeted poisoning --------------

    def poison_after(self, kind: str, cell: int, times: int = 1) -> None:
        """Poison ``cell`` right after the next ``kind`` ('read'/'write') covering it."""
        self._hooks[(kind, cell)] = times

    def _fire(self, kind: str, start: int, stop: int) -> None:
        for (k, cell), left in list(self._hooks.items()):
            if k == kind and left > 0 and start <= cell < stop:
                self._hooks[(k, cell)] = left - 1
                self.store.poison(cell)

    def _read(self, start: int, stop: int) -> np.ndarray:
        values = self.store.read_range(start, stop)
        if self._hooks:
            self._fire("read", start, stop)
        return values

    def _write(self, start: int, values) -> None:
        self.store.write_range(start, values)
        if self._hooks:
            self._fire("write", start, start + len(values))

    def _wrap(self, fn: Task, label: str) -> Task:
        if not self.spec.diagnostics:
            return fn
        store, traces = self.store, self.traces

        def traced(handle: NodeHandle) -> None:
            trace = AccessTrace()
            trace.label = label
            traces.append(trace)
            with store.tracing(trace):
                fn(handle)

        return traced


def _noop(handle: NodeHandle) -> None:
    pass


class QsortKernel(Kernel):
    """Binary quicksort: partition in the task, merge barrier as continuation.

    The pivot is the median of the region, so the split point and the
    multiset of each sub-region depend only on the region's contents.  In
    the buffered variant a node at depth ``k`` reads buffer ``k`` and writes
    buffer ``k + 1``; leaves sort into the output region.  Every cell then
    only ever receives one value, whichever epoch writes it.

    The in-place variant sorts a single buffer.  Re-partitioning any
    permutation of a region still sorts it, but it reads cells it then
    overwrites, and the idempotence diagnostic reports them.
    """

    def _build_store(self) -> PoisonableStore:
        n = self.spec.size
        rng = np.random.default_rng(self.spec.seed)
        self.input = rng.integers(0, max(n, 1) * 4, size=n).astype(np.float64)
        self.n = n
        if self.spec.variant == "inplace":
            self.levels = 1
            store = PoisonableStore(2 * n)
            store.write_range(n, self.input)
        else:
            leaves = max(1, math.ceil(n / max(self.spec.cutoff, 1)))
            self.levels = math.ceil(math.log2(leaves)) + 2
            # Layout: [input | buf 1 | ... | buf levels | output]
            store = PoisonableStore((self.levels + 2) * n)
        store.write_range(0, self.input)
        return store

    def buffer(self, depth: int) -> int:
        """Start offset of the buffer read by nodes at ``depth``."""
        return depth * self.n

    @property
    def out(self) -> int:
        return (self.levels + 1) * self.n if self.spec.variant != "inplace" else self.n

    def trees(self) -> Iterator[Task]:
        if self.spec.variant == "inplace":
            yield self._wrap(self._inplace(0, self.n), "qsort-inplace")
        else:
            yield self._wrap(self._task(0, self.n, 0), "qsort")

    def _task(self, start: int, end: int, depth: int) -> Task:
        def qsort(handle: NodeHandle) -> None:
            if start >= end:
                return
            src = self.buffer(depth)
            values = self._read(src + start, src + end)
            if end - start <= self.spec.cutoff or depth + 1 > self.levels:
                values.sort(kind="stable")
                self._write(self.out + start, values)
                return
            pivot = np.partition(values, len(values) // 2)[len(values) // 2]
            less = values[values < pivot]
            greater = values[values > pivot]
            n_eq = len(values) - len(less) - len(greater)
            dst = self.buffer(depth + 1)
            lo, hi = start + len(less), start + len(less) + n_eq
            self._write(dst + start, less)
            self._write(dst + hi, greater)
            self._write(self.out + lo, np.full(n_eq, pivot))
            handle.fork(self._wrap(self._task(start, lo, depth + 1), "qsort"))
            handle.fork(self._wrap(self._task(hi, end, depth + 1), "qsort"))
            handle.join(self._wrap(_noop, "qsort-merge"))

        return qsort

    def _inplace(self, start: int, end: int) -> Task:
        def qsort(handle: NodeHandle) -> None:
            if start >= end:
                return
            base = self.out
            values = self._read(base + start, base + end)
            if end - start <= self.spec.cutoff:
                values.sort(kind="stable")
                self._write(base + start, values)
                return
            pivot = np.partition(values, len(values) // 2)[len(values) // 2]
            less = values[values < pivot]
            greater = values[values > pivot]
            lo, hi = start + len(less), end - len(greater)
            self._write(base + start, np.concatenate([less, np.full(hi - lo, pivot), greater]))
            handle.fork(self._wrap(self._inplace(start, lo), "qsort-inplace"))
            handle.fork(self._wrap(self._inplace(hi, end), "qsort-inplace"))
            handle.join(self._wrap(_noop, "qsort-merge"))

        return qsort

    def output(self) -> np.ndarray:
        return self.store.snapshot()[self.out : self.out + self.n]

    def oracle(self) -> np.ndarray:
        return np.sort(self.input, kind="stable")


def _poly(x: np.ndarray) -> np.ndarray:
    return x * x + 3.0 * x + 1.0


MAP_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "poly": _poly,
    "identity": lambda x: x.copy(),
}


class MapKernel(Kernel):
    """``out[i] = f(in[i])`` by recursive halving down to the cutoff."""

    def _build_store(self) -> PoisonableStore:
        n = self.spec.size
        rng = np.random.default_rng(self.spec.seed)
        self.input = rng.random(n)
        self.n = n
        self.f = MAP_FUNCTIONS[self.spec.map_fn]
        store = PoisonableStore(2 * n)
        store.write_range(0, self.input)
        return store

    def trees(self) -> Iterator[Task]:
        yield self._wrap(self._task(0, self.n), "map")

    def _task(self, start: int, end: int) -> Task:
        def map_task(handle: NodeHandle) -> None:
            if end - start <= self.spec.cutoff:
                if end > start:
                    self._write(self.n + start, self.f(self._read(start, end)))
                return
            mid = (start + end) // 2
            handle.fork(self._wrap(self._task(start, mid), "map"))
            handle.fork(self._wrap(self._task(mid, end), "map"))

        return map_task

    def output(self) -> np.ndarray:
        return self.store.snapshot()[self.n : 2 * self.n]

    def oracle(self) -> np.ndarray:
        return self.f(self.input)


class ReduceKernel(Kernel):
    """Tree sum; every node owns a distinct result cell (heap numbering)."""

    def __init__(self, spec: KernelSpec, data: Optional[np.ndarray] = None) -> None:
        self._data = data
        super().__init__(spec)

    def _build_store(self) -> PoisonableStore:
        if self._data is not None:
            self.input = np.asarray(self._data, dtype=np.int64)
        else:
            rng = np.random.default_rng(self.spec.seed)
            self.input = rng.integers(-1000, 1000, size=self.spec.size, dtype=np.int64)
        self.n = n = len(self.input)
        leaves = max(1, math.ceil(n / max(self.spec.cutoff, 1)))
        self.n_cells = 2 ** (math.ceil(math.log2(leaves)) + 2)
        store = PoisonableStore(n + self.n_cells, dtype=np.int64)
        store.write_range(0, self.input)
        return store

    def trees(self) -> Iterator[Task]:
        yield self._wrap(self._task(0, self.n, 0), "reduce")

    def _task(self, start: int, end: int, idx: int) -> Task:
        res = self.n

        def reduce_task(handle: NodeHandle) -> None:
            if end - start <= self.spec.cutoff:
                self._write(res + idx, [int(self._read(start, end).sum())])
                return
            mid = (start + end) // 2
            left, right = 2 * idx + 1, 2 * idx + 2
            handle.fork(self._wrap(self._task(start, mid, left), "reduce"))
            handle.fork(self._wrap(self._task(mid, end, right), "reduce"))

            def combine(h: NodeHandle) -> None:
                a = self._read(res + left, res + left + 1)[0]
                b = self._read(res + right, res + right + 1)[0]
                self._write(res + idx, [a + b])

            handle.join(self._wrap(combine, "reduce-combine"))

        return reduce_task

    def result(self) -> int:
        return int(self.store.snapshot()[self.n])

    def output(self) -> np.ndarray:
        return np.array([self.result()])

    def oracle(self) -> np.ndarray:
        return np.array([int(self.input.sum())])


def leaf_value(leaf: int, work: int) -> int:
    """Closed form of what a treegen leaf computes: sum of its ``work`` integers."""
    return leaf * work * work + work * (work - 1) // 2


class TreegenKernel(Kernel):
    """``num_trees`` successive trees of given depth and fanout.

    Leaf ``L`` adds up the integers ``L*W .. L*W + W - 1`` one by one
    (``W = leaf_work``) into its own cell; each continuation sums its
    children's cells into its own cell.
    """

    def _build_store(self) -> PoisonableStore:
        s = self.spec
        self.leaves_per_tree = s.fanout**s.depth
        self.nodes_per_tree = sum(s.fanout**k for k in range(s.depth + 1))
        return PoisonableStore(s.num_trees * self.nodes_per_tree, dtype=np.int64)

    def tree_count(self) -> int:
        return self.spec.num_trees

    def node_count(self) -> int:
        return self.spec.num_trees * self.nodes_per_tree

    def trees(self) -> Iterator[Task]:
        for t in range(self.spec.num_trees):
            yield self._wrap(self._task(t, 0, 0, 0), "treegen")

    def _task(self, tree: int, depth: int, pos: int, first_leaf: int) -> Task:
        s = self.spec
        f = s.fanout
        cell = self._child_cell(tree, depth, pos)

        def treegen_task(handle: NodeHandle) -> None:
            if depth == s.depth:
                leaf = tree * self.leaves_per_tree + first_leaf
                work = s.leaf_work
                base = leaf * work
                acc = 0
                for k in range(work):
                    acc += base + k
                    if k & 2047 == 2047:
                        safe_point()
                self._write(cell, [acc])
                return
            span = f ** (s.depth - depth - 1)
            kids = []
            for i in range(f):
                kids.append(self._child_cell(tree, depth + 1, pos * f + i))
                handle.fork(
                    self._wrap(
                        self._task(tree, depth + 1, pos * f + i, first_leaf + i * span), "treegen"
                    )
                )

            def combine(h: NodeHandle) -> None:
                total = 0
                for c in kids:
                    total += int(self._read(c, c + 1)[0])
                self._write(cell, [total])

            handle.join(self._wrap(combine, "treegen-combine"))

        return treegen_task

    def _child_cell(self, tree: int, depth: int, pos: int) -> int:
        """Level-order cell index of node ``pos`` at ``depth`` in ``tree``."""
        f = self.spec.fanout
        if f == 1:
            return tree * self.nodes_per_tree + depth
        return tree * self.nodes_per_tree + (f**depth - 1) // (f - 1) + pos

    def root_cells(self) -> np.ndarray:
        return self.store.snapshot()[:: self.nodes_per_tree]

    def checksum(self) -> int:
        return int(self.root_cells().sum())

    def output(self) -> np.ndarray:
        return self.store.snapshot()

    def oracle(self) -> np.ndarray:
        s = self.spec
        out = np.zeros(self.node_count(), dtype=np.int64)
        for t in range(s.num_trees):
            base = t * self.nodes_per_tree
            level = [leaf_value(t * self.leaves_per_tree + i, s.leaf_work) for i in range(self.leaves_per_tree)]
            for depth in range(s.depth, -1, -1):
                first = (s.fanout**depth - 1) // (s.fanout - 1) if s.fanout > 1 else depth
                out[base + first : base + first + len(level)] = level
                level = [sum(level[i : i + s.fanout]) for i in range(0, len(level), s.fanout)]
        return out

    def closed_form_checksum(self) -> int:
        total = self.spec.num_trees * self.leaves_per_tree * self.spec.leaf_work
        return total * (total - 1) // 2


_KERNEL_TYPES = {"qsort": QsortKernel, "map": MapKernel, "reduce": ReduceKernel, "treegen": TreegenKernel}


def make_kernel(spec: KernelSpec) -> Kernel:
    return _KERNEL_TYPES[spec.name](spec)


def qsort_kernel(spec: KernelSpec) -> QsortKernel:
    return QsortKernel(spec)


def map_kernel(spec: KernelSpec) -> MapKernel:
    return MapKernel(spec)


def reduce_kernel(spec: KernelSpec) -> ReduceKernel:
    return ReduceKernel(spec)


def treegen_kernel(spec: KernelSpec) -> TreegenKernel:
    return TreegenKernel(spec)


def sequential_run(root: Task) -> None:
    """Depth-first single-threaded executor of a fork/join tree (oracle helper)."""
    from .task_graph import NodeArena, run_continuation, run_task

    arena = NodeArena()
    node = arena.new_node(None, root)

    def visit(n) -> None:
        run_task(n, arena)
        for child in n.children:
            visit(child)
        run_continuation(n, arena)

    visit(node)
