"""Clock, atom bookkeeping, layout geometry, RNG streams and loss channels."""

from __future__ import annotations

import heapq
import math
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Any, Iterator

import numpy as np


class SimError(Exception):
    """Base class for simulator errors."""


class CausalityError(SimError, ValueError):
    pass


class ProbabilityError(SimError, ValueError):
    pass


def check_probability(p, name="probability"):
    """Raise unless every entry of ``p`` lies in [0, 1]."""
    arr = np.asarray(p, dtype=float)
    if arr.size and (np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ProbabilityError(f"{name} outside [0, 1]: {p!r}")
    return p


US_PER_S = 1_000_000
US_PER_MS = 1_000


def us(seconds: float) -> int:
    """Seconds to integer microseconds (rounded)."""
    return int(round(seconds * US_PER_S))


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


# ---------------------------------------------------------------------------
# clock


class SimClock:
    """Integer-microsecond event queue.  Ties pop in insertion order."""

    def __init__(self, now: int = 0):
        self.now = int(now)
        self._queue: list[tuple[int, int, Any, Any]] = []
        self._seq = 0

    def __len__(self):
        return len(self._queue)

    def schedule(self, at: int, tag, payload=None) -> "SimClock":
        at = int(at)
        if at < self.now:
            raise CausalityError(f"cannot schedule {tag!r} at {at} us, clock is at {self.now} us")
        heapq.heappush(self._queue, (at, self._seq, tag, payload))
        self._seq += 1
        return self

    def peek_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def pop(self):
        """Advance to the next event and return ``(time, tag, payload)``."""
        at, _, tag, payload = heapq.heappop(self._queue)
        self.now = at
        return at, tag, payload

    def advance(self, to: int):
        if to < self.now:
            raise CausalityError(f"cannot move clock back from {self.now} to {to}")
        self.now = int(to)

    def drain(self) -> Iterator[tuple[int, Any, Any]]:
        while self._queue:
            yield self.pop()


def schedule(clock: SimClock, at: int, tag, payload=None) -> SimClock:
    return clock.schedule(at, tag, payload)


# ---------------------------------------------------------------------------
# random streams


def stream_id(trial: int, module: str) -> int:
    """Stable 64-bit stream id for a (trial, module) pair."""
    return ((int(trial) & 0xFFFFFFFF) << 32) | zlib.crc32(module.encode())


@dataclass(frozen=True)
class SeededRng:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1),
                                    spawn_key=(int(self.stream_id) & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def for_module(cls, seed: int, trial: int, module: str) -> "SeededRng":
        return cls(seed, stream_id(trial, module))


# ---------------------------------------------------------------------------
# atoms


class AtomState(IntEnum):
    Q0 = 0
    Q1 = 1
    MF_LEAKED = 2
    UNPOLARIZED = 3
    LOST = 4


QUBIT_STATES = (AtomState.Q0, AtomState.Q1)


@dataclass
class AtomRecord:
    internal: AtomState = AtomState.Q0
    bloch: tuple[float, float, float] = (0.0, 0.0, 1.0)
    birth_time: int = 0
    site: tuple[str, int, int] = ("prep", 0, 0)

    @property
    def bloch_z(self) -> float:
        return self.bloch[2]

    @property
    def bloch_xy(self) -> float:
        return math.hypot(self.bloch[0], self.bloch[1])


class AtomArray:
    """Struct-of-arrays store for one tweezer zone.

    A site either holds an atom (``occupied``) or not.  Loss marks the state
    LOST, clears occupancy and bumps the ``lost`` counter, so
    ``created == population + lost`` always holds.
    """

    def __init__(self, n_sites: int, zone: str = "storage"):
        self.zone = zone
        self.n_sites = int(n_sites)
        self.occupied = np.zeros(self.n_sites, dtype=bool)
        self.state = np.full(self.n_sites, AtomState.LOST, dtype=np.int8)
        self.bloch = np.zeros((self.n_sites, 3))
        self.birth = np.zeros(self.n_sites, dtype=np.int64)
        self.created = 0
        self.lost = 0

    @property
    def population(self) -> int:
        return int(self.occupied.sum())

    def place(self, sites, states, now: int, bloch=None):
        sites = np.asarray(sites, dtype=np.int64)
        if self.occupied[sites].any():
            raise SimError("placing an atom on an occupied site")
        self.occupied[sites] = True
        self.state[sites] = states
        if bloch is None:
            b = np.zeros((sites.size, 3))
            st = np.broadcast_to(np.asarray(states), sites.shape)
            b[st == AtomState.Q0, 2] = 1.0
            b[st == AtomState.Q1, 2] = -1.0
            self.bloch[sites] = b
        else:
            self.bloch[sites] = bloch
        self.birth[sites] = now
        self.created += sites.size

    def remove(self, sites) -> int:
        """Mark atoms at ``sites`` LOST; returns how many were present."""
        sites = np.asarray(sites, dtype=np.int64)
        hit = sites[self.occupied[sites]]
        self.occupied[hit] = False
        self.state[hit] = AtomState.LOST
        self.bloch[hit] = 0.0
        self.lost += hit.size
        return int(hit.size)

    def qubit_mask(self) -> np.ndarray:
        return self.occupied & (self.state <= AtomState.Q1)

    def record(self, site: int, layout: "ZoneLayout | None" = None) -> AtomRecord:
        if layout is not None and self.zone == "storage":
            r, c = divmod(site, layout.storage_cols)
        else:
            r, c = 0, site
        return AtomRecord(AtomState(int(self.state[site])), tuple(float(v) for v in self.bloch[site]),
                          int(self.birth[site]), (self.zone, r, c))

    def copy(self) -> "AtomArray":
        out = AtomArray.__new__(AtomArray)
        out.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return out


def survive_exponential(atoms: AtomArray, dt: int, lifetime: float, rng: np.random.Generator,
                        mask: np.ndarray | None = None) -> AtomArray:
    """Independent exponential loss over ``dt`` microseconds."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if lifetime <= 0:
        raise ValueError("lifetime must be positive")
    if dt == 0 or math.isinf(lifetime):
        return atoms
    p_keep = math.exp(-dt / (lifetime * US_PER_S))
    cand = atoms.occupied if mask is None else atoms.occupied & mask
    idx = np.flatnonzero(cand)
    gone = idx[rng.random(idx.size) >= p_keep]
    atoms.remove(gone)
    return atoms


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class ZoneLayout:
    prep_rows: int = 12
    prep_cols: int = 120
    prep_spacing: float = 4.5e-6
    storage_rows: int = 36
    storage_cols: int = 90
    storage_channel_narrow: float = 3e-6
    storage_channel_wide: float = 6e-6
    storage_v_spacing: float = 9e-6
    n_subarrays: int = 6
    target_sites: int = 540

    def __post_init__(self):
        if self.storage_cols % 2:
            raise ValueError("storage_cols must be even (paired columns)")
        if self.storage_rows % (self.n_subarrays // 2) or self.n_subarrays % 2:
            raise ValueError("storage rows must split evenly into subarray row blocks")
        if self.target_sites % self.prep_rows:
            raise ValueError("target_sites must be a multiple of prep_rows")
        if self.targets_per_row > self.prep_cols:
            raise ValueError("too many targets per row")

    @property
    def prep_sites(self) -> int:
        return self.prep_rows * self.prep_cols

    @property
    def storage_sites(self) -> int:
        return self.storage_rows * self.storage_cols

    @property
    def subarray_sites(self) -> int:
        return self.storage_sites // self.n_subarrays

    @property
    def targets_per_row(self) -> int:
        return self.target_sites // self.prep_rows

    @cached_property
    def target_columns(self) -> np.ndarray:
        """Every other prep column, centred in the row."""
        n = self.targets_per_row
        start = (self.prep_cols - (2 * n - 1)) // 2
        return start + 2 * np.arange(n, dtype=np.int64)

    def storage_xy(self) -> np.ndarray:
        """Site coordinates (m).  Columns come in pairs 3 um apart, pairs 9 um apart."""
        c = np.arange(self.storage_cols)
        pitch = self.storage_channel_narrow + self.storage_channel_wide
        x = (c // 2) * pitch + (c % 2) * self.storage_channel_narrow
        y = np.arange(self.storage_rows) * self.storage_v_spacing
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    @cached_property
    def _subarray_table(self) -> np.ndarray:
        half = self.n_subarrays // 2
        block = self.storage_rows // half
        r, c = np.divmod(np.arange(self.storage_sites), self.storage_cols)
        # column parity interleaves neighbours; row blocks stack vertically
        return ((r // block) * 2 + (c % 2)).astype(np.int64)

    def subarray_of(self, site) -> np.ndarray:
        return self._subarray_table[site]

    def subarray_sites_of(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_subarrays:
            raise IndexError(k)
        return np.flatnonzero(self._subarray_table == k)
