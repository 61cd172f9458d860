"""Exception types shared by the runtime, the store and the injector."""

from __future__ import annotations


class SimulatedFault(Exception):
    """A recoverable hardware-style fault; the receiving worker runs its failure path."""


class PoisonFault(SimulatedFault):
    """A read touched a poisoned store cell."""

    def __init__(self, index: int) -> None:
        super().__init__(f"read of poisoned cell {index}")
        self.index = index


class InjectedFailure(SimulatedFault):
    """A failure token delivered by the injector or by a worst-case continuation."""
