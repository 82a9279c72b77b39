"""Conveyor kinematics and the MOT -> Lattice-1 -> Lattice-2 delivery schedule."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from atomreload.core import ms_to_us


@dataclass(frozen=True)
class ConveyorProfile:
    wavelength: float = 795.6e-9
    a_max: float = 4000.0
    v_max: float = 9.0
    distance: float = 0.39

    def __post_init__(self):
        if self.a_max <= 0 or self.v_max <= 0 or self.distance < 0:
            raise ValueError("conveyor needs a_max > 0, v_max > 0, distance >= 0")


def velocity(profile: ConveyorProfile, delta_nu: float) -> float:
    """Lattice velocity for a beam detuning ``delta_nu`` (Hz)."""
    return profile.wavelength * delta_nu / 2


def min_transport_time(profile: ConveyorProfile) -> float:
    """Shortest accelerate/cruise/decelerate time (s) over ``distance``."""
    d, a, v = profile.distance, profile.a_max, profile.v_max
    if d == 0:
        return 0.0
    if d <= v * v / a:
        return 2 * math.sqrt(d / a)
    return d / v + v / a


@dataclass(frozen=True)
class StageTimings:
    mot_load_ms: float = 80.0
    compression_ms: float = 7.0
    lgm_ms: float = 11.0
    l1_transport_ms: float = 50.0
    handover_ms: float = 1.0
    l2_transport_ms: float = 21.0
    replacement_period_ms: float = 150.0
    shuttle_ms: float = 2.0

    def __post_init__(self):
        if self.replacement_period_ms < self.l2_transport_ms + self.handover_ms:
            raise ValueError("replacement period shorter than handover + second transport")

    @property
    def ready_us(self) -> int:
        """MOT start to cloud parked at the end of Lattice-1."""
        return ms_to_us(self.mot_load_ms + self.compression_ms + self.lgm_ms + self.l1_transport_ms)

    @property
    def handover_us(self) -> int:
        return ms_to_us(self.handover_ms)

    @property
    def l2_us(self) -> int:
        return ms_to_us(self.l2_transport_ms)

    @property
    def period_us(self) -> int:
        return ms_to_us(self.replacement_period_ms)

    @property
    def shuttle_us(self) -> int:
        return ms_to_us(self.shuttle_ms)


@dataclass(frozen=True)
class TransferBudget:
    efficiency: float = 0.60
    temperature_factor: float = 6.0
    mot_atoms: float = 2.5e6 / 0.60
    mot_temperature: float = 20e-6

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("transport efficiency must lie in (0, 1]")
        if self.temperature_factor <= 0:
            raise ValueError("temperature factor must be positive")

    def apply(self, n_mot: float | None = None, t_mot: float | None = None) -> tuple[float, float]:
        """Atom number and temperature on arrival in the science region."""
        n_mot = self.mot_atoms if n_mot is None else n_mot
        t_mot = self.mot_temperature if t_mot is None else t_mot
        return n_mot * self.efficiency, t_mot * self.temperature_factor


@dataclass(frozen=True)
class TimelineEntry:
    reservoir_id: int
    mot_start_us: int
    handover_us: int
    arrival_us: int
    gap_start_us: int | None
    gap_end_us: int | None


def pipeline_timeline(timings: StageTimings, n_reservoirs: int) -> list[TimelineEntry]:
    """Free-running delivery schedule (no waiting on extraction cycles).

    A fresh cloud leaves Lattice-1 as soon as it is ready and the previous
    MOT slot has elapsed; the old reservoir leaves the field of view when the
    handover finishes, so each arrival after the first is preceded by a gap
    of exactly ``l2_transport``.
    """
    if n_reservoirs < 1:
        raise ValueError("n_reservoirs must be >= 1")
    out = []
    mot = 0
    for k in range(n_reservoirs):
        ready = mot + timings.ready_us
        if out:
            ready = max(ready, out[-1].arrival_us + timings.period_us - timings.l2_us - timings.handover_us)
        handover_end = ready + timings.handover_us
        arrival = handover_end + timings.l2_us
        gap = (handover_end, arrival) if k else (None, None)
        out.append(TimelineEntry(k, mot, handover_end, arrival, *gap))
        mot = max(handover_end, mot + timings.period_us)
    return out


def present_windows(timeline: list[TimelineEntry]) -> list[tuple[int, int | None]]:
    """(start, end) of each reservoir's stay; the last one is open-ended."""
    out = []
    for k, e in enumerate(timeline):
        end = timeline[k + 1].gap_start_us if k + 1 < len(timeline) else None
        out.append((e.arrival_us, end))
    return out


def write_timeline_csv(timeline: list[TimelineEntry], path, version_line: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(version_line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reservoir_id", "arrival_us", "gap_start_us", "gap_end_us"])
        for e in timeline:
            w.writerow([e.reservoir_id, e.arrival_us,
                        "" if e.gap_start_us is None else e.gap_start_us,
                        "" if e.gap_end_us is None else e.gap_end_us])
