"""Continuous-reloading atom array simulator.

The package models a pipelined neutral-atom source: reservoir delivery by
optical conveyors, tweezer extraction, preparation (parity projection,
imaging, rearrangement, optical pumping), a cyclically refilled storage array
and the coherence of stored qubits.
"""

from atomreload.core import (
    AtomArray,
    AtomRecord,
    AtomState,
    SeededRng,
    SimClock,
    ZoneLayout,
    survive_exponential,
)

__version__ = "0.1.0"

__all__ = [
    "AtomArray",
    "AtomRecord",
    "AtomState",
    "SeededRng",
    "SimClock",
    "ZoneLayout",
    "survive_exponential",
]
