"""Explicit fork/join tree: nodes, their life cycle, and the fork/join API.

Every task runs with a :class:`NodeHandle` bound to the node (and version
epoch) it was issued for.  ``fork`` and ``join`` only record structure; user
code is executed later by the scheduling loop.
"""

from __future__ import annotations

import enum
import itertools
import threading
from typing import Any, Callable, Optional

Task = Callable[["NodeHandle"], Any]


class NodeState(enum.IntEnum):
    FREE = 0
    BUSY = 1
    INACTIVE = 2
    DONE = 3


LEGAL_TRANSITIONS = frozenset(
    {
        (NodeState.FREE, NodeState.BUSY),
        (NodeState.BUSY, NodeState.DONE),
        (NodeState.BUSY, NodeState.INACTIVE),
        (NodeState.INACTIVE, NodeState.BUSY),
    }
)


class IllegalTransition(ValueError):
    """A (from, to) pair outside the node life cycle was requested."""


class ForkJoinUsageError(RuntimeError):
    """The user program misused fork/join (double join, fork in a continuation...)."""


class StaleEpochError(RuntimeError):
    """A handle from a superseded version epoch was used.

    Raised by fork/join; the scheduler abandons the execution that owned the
    handle since a restart of the node is in progress elsewhere.
    """


class TaskNode:
    """One node of the fork/join tree.

    ``state`` is the only field raced on by several threads (through
    :meth:`cas`).  ``version`` is written by the single worker reclaiming the
    node and read by everybody.  ``children`` and ``continuation`` follow a
    single-writer discipline: only the worker holding the node busy writes
    them.  ``children`` is replaced wholesale on reactivation, so readers
    holding the old list see a consistent (stale) snapshot.
    """

    __slots__ = (
        "id",
        "parent",
        "children",
        "task",
        "continuation",
        "_state",
        "version",
        "reclaims",
        "birth_reclaims",
        "_lock",
        "__weakref__",
    )

    def __init__(
        self,
        id: int,
        parent: Optional[TaskNode],
        task: Optional[Task],
        version: int = 0,
        state: NodeState = NodeState.FREE,
    ) -> None:
        self.id = id
        self.parent = parent
        self.children: list[TaskNode] = []
        self.task = task
        self.continuation: Optional[Task] = None
        self._state = state
        self.version = version
        # Diagnostic only: count of reclaim decisions taken on this node, and
        # the parent's count when this node was forked.  The checker uses them
        # as ghost epochs; the protocol never reads them.
        self.reclaims = 0
        self.birth_reclaims = parent.reclaims if parent is not None else 0
        self._lock = threading.Lock()

    @property
    def state(self) -> NodeState:
        return self._state

    def store_state(self, state: NodeState) -> None:
        """Plain publication store, used only by the single reclaiming worker."""
        self._state = state

    def cas(self, expected: NodeState, new: NodeState) -> bool:
        with self._lock:
            if self._state is expected:
                self._state = new
                return True
            return False

    def __repr__(self) -> str:
        return f"TaskNode(id={self.id}, state={self._state.name}, version={self.version})"


def transition(node: TaskNode, from_: NodeState, to: NodeState) -> bool:
    """Atomically move ``node`` from ``from_`` to ``to``.

    Returns False (and changes nothing) when the node is not in ``from_``.
    Illegal pairs are rejected before the state cell is touched.
    """
    if (from_, to) not in LEGAL_TRANSITIONS:
        raise IllegalTransition(f"{from_.name} -> {to.name}")
    return node.cas(from_, to)


class NodeArena:
    """Owns every node of one computation; nothing is freed until it ends.

    Parents and thieves may keep reading state/version of superseded nodes,
    so retention is simpler than reclamation.
    """

    def __init__(self) -> None:
        self.nodes: list[TaskNode] = []
        self._ids = itertools.count()

    def new_node(
        self,
        parent: Optional[TaskNode],
        task: Optional[Task],
        version: int = 0,
        state: NodeState = NodeState.FREE,
    ) -> TaskNode:
        node = TaskNode(next(self._ids), parent, task, version, state)
        self.nodes.append(node)
        return node

    def truncate(self, size: int) -> None:
        """Forget nodes created after the first ``size`` (checker rewinds only)."""
        del self.nodes[size:]
        self._ids = itertools.count(size)

    def __len__(self) -> int:
        return len(self.nodes)


class NodeHandle:
    """The "current node" capability passed to a task or continuation.

    Valid only while the execution it was issued for is running, and only for
    the version epoch the node had at that moment.
    """

    __slots__ = (
        "_node",
        "_version",
        "_children",
        "_arena",
        "_continuation",
        "_joined",
        "_active",
    )

    def __init__(
        self, node: TaskNode, arena: NodeArena, *, continuation: bool = False
    ) -> None:
        self._node = node
        self._version = node.version
        # Reactivation installs a new list, so appends through a stale handle
        # land in the superseded list and never in the new epoch's.
        self._children = node.children
        self._arena = arena
        self._continuation = continuation
        self._joined = False
        self._active = True

    @property
    def node_id(self) -> int:
        return self._node.id

    @property
    def version(self) -> int:
        return self._version

    def _check(self, op: str) -> None:
        if self._continuation:
            raise ForkJoinUsageError(f"{op} called from a continuation")
        if not self._active or self._node.version != self._version:
            raise StaleEpochError(
                f"{op} on node {self._node.id} from superseded epoch {self._version}"
            )

    def fork(self, task: Task) -> None:
        self._check("fork")
        child = self._arena.new_node(self._node, task, version=self._version)
        self._children.append(child)

    def join(self, continuation: Task) -> None:
        self._check("join")
        if self._joined:
            raise ForkJoinUsageError(f"second join on node {self._node.id}")
        self._joined = True
        self._node.continuation = continuation

    def close(self) -> None:
        self._active = False


def fork(current: NodeHandle, task: Task) -> None:
    current.fork(task)


def join(current: NodeHandle, continuation: Task) -> None:
    current.join(continuation)


def run_task(node: TaskNode, arena: NodeArena) -> None:
    """Execute ``node.task`` with a fresh handle, closing it afterwards."""
    handle = NodeHandle(node, arena)
    try:
        if node.task is not None:
            node.task(handle)
    finally:
        handle.close()


def run_continuation(node: TaskNode, arena: NodeArena) -> None:
    cont = node.continuation
    if cont is None:
        return
    handle = NodeHandle(node, arena, continuation=True)
    try:
        cont(handle)
    finally:
        handle.close()
