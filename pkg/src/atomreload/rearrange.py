"""Row-parallel, order-preserving rearrangement planner and executor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from atomreload.core import ZoneLayout, check_probability, ms_to_us
from atomreload.kernels import SKIP_PENALTY, match_row


@dataclass(frozen=True)
class RowInstance:
    loaded: tuple[int, ...]
    targets: tuple[int, ...]
    row_id: int = 0

    def __post_init__(self):
        for name in ("loaded", "targets"):
            v = np.asarray(getattr(self, name))
            if v.size and (np.any(np.diff(v) <= 0) or v.min() < 0):
                raise ValueError(f"{name} must be strictly increasing non-negative columns")


@dataclass(frozen=True)
class MoveKinematics:
    """Pickup -> shift into the inter-row gap -> lateral trapezoid -> drop."""

    site_spacing: float = 4.5e-6
    v_max: float = 1.25
    a_max: float = 2.0e4
    ramp_us: int = 75
    gap_shift_us: int = 25

    def lateral_us(self, sites: int) -> int:
        d = abs(sites) * self.site_spacing
        if d == 0:
            return 0
        v, a = self.v_max, self.a_max
        t = 2 * math.sqrt(d / a) if d <= v * v / a else d / v + v / a
        return int(math.ceil(t * 1e6))

    def segments(self, sites: int) -> tuple[int, int, int]:
        if sites == 0:
            return (0, 0, 0)
        edge = self.ramp_us + self.gap_shift_us
        return (edge, self.lateral_us(sites), edge)


@lru_cache(maxsize=16)
def segment_table(kin: MoveKinematics, n_cols: int) -> np.ndarray:
    """Segment durations (us) indexed by |displacement| in sites; built once per layout."""
    return np.array([kin.segments(d) for d in range(n_cols)], dtype=np.int64)


@dataclass(frozen=True)
class PlanTiming:
    image_latency_ms: float = 10.0
    per_row_us: int = 700
    buffer_ms: float = 1.6
    roi_extra_ms: float = 0.0

    def __post_init__(self):
        if min(self.image_latency_ms, self.per_row_us, self.buffer_ms, self.roi_extra_ms) < 0:
            raise ValueError("timing values must be >= 0")

    def total_us(self, rows: int) -> int:
        return (ms_to_us(self.image_latency_ms + self.roi_extra_ms + self.buffer_ms)
                + rows * int(self.per_row_us))


@dataclass(frozen=True)
class RowPlan:
    row_id: int
    assignment: tuple[tuple[int, int], ...]
    segments: tuple[tuple[int, int, int], ...]
    duration_us: int
    defects: int
    displacement: int
    n_targets: int = 0

    def to_dict(self):
        return {
            "row": self.row_id,
            "assignment": [list(p) for p in self.assignment],
            "duration_us": self.duration_us,
            "defects": self.defects,
            "displacement": self.displacement,
        }


@dataclass(frozen=True)
class ArrayPlan:
    rows: tuple[RowPlan, ...]
    targets: np.ndarray = field(repr=False)
    total_time_us: int = 0

    @property
    def n_targets(self) -> int:
        return len(self.rows) * len(self.targets)

    @property
    def defects(self) -> int:
        return sum(r.defects for r in self.rows)

    @property
    def predicted_fill(self) -> float:
        return 1.0 - self.defects / self.n_targets if self.n_targets else 1.0

    def to_dict(self):
        return {
            "n_targets": self.n_targets,
            "defects": self.defects,
            "predicted_fill": self.predicted_fill,
            "total_time_us": self.total_time_us,
            "target_columns": [int(c) for c in self.targets],
            "rows": [r.to_dict() for r in self.rows],
        }


def plan_row(inst: RowInstance, kin: MoveKinematics | None = None, per_row_us: int = 700,
             n_cols: int | None = None) -> RowPlan:
    """Minimum-displacement order-preserving plan that covers as many targets as possible."""
    kin = kin or MoveKinematics()
    src = np.asarray(inst.loaded, dtype=np.int64)
    tgt = np.asarray(inst.targets, dtype=np.int64)
    si, ti, cost = match_row(src, tgt, SKIP_PENALTY)
    pairs = tuple((int(src[a]), int(tgt[b])) for a, b in zip(si, ti))
    defects = tgt.size - len(pairs)
    displacement = cost - defects * SKIP_PENALTY
    width = n_cols or int(max(src.max(initial=0), tgt.max(initial=0)) + 1)
    table = segment_table(kin, width)
    segs = tuple(tuple(int(x) for x in table[abs(t - s)]) for s, t in pairs)
    longest = max((sum(s) for s in segs), default=0)
    return RowPlan(inst.row_id, pairs, segs, max(int(per_row_us), longest), defects,
                   int(displacement), int(tgt.size))


def plan_array(detections: np.ndarray, layout: ZoneLayout, timing: PlanTiming | None = None,
               kin: MoveKinematics | None = None) -> ArrayPlan:
    timing = timing or PlanTiming()
    det = np.asarray(detections, dtype=bool).reshape(layout.prep_rows, layout.prep_cols)
    targets = layout.target_columns
    rows = tuple(
        plan_row(RowInstance(tuple(np.flatnonzero(det[r]).tolist()), tuple(targets.tolist()), r),
                 kin, timing.per_row_us, layout.prep_cols)
        for r in range(layout.prep_rows)
    )
    total = timing.total_us(0) + sum(r.duration_us for r in rows)
    return ArrayPlan(rows, targets, total)


def execute_plan(plan: ArrayPlan, move_survival: float, rng: np.random.Generator,
                 occupancy: np.ndarray | None = None) -> np.ndarray:
    """Target-array occupancy (rows x targets) after running ``plan``.

    ``occupancy`` is the true prep-array occupancy; when omitted the
    detections the plan was built from are taken as exact.  An undetected
    atom left on a target site stays there unless another atom is dropped on
    it, in which case both are lost.
    """
    check_probability(move_survival, "move_survival")
    targets = plan.targets
    out = np.zeros((len(plan.rows), len(targets)), dtype=bool)
    col_to_idx = {int(c): i for i, c in enumerate(targets)}
    for r, row in enumerate(plan.rows):
        if not row.assignment:
            if occupancy is not None:
                out[r] = occupancy[r, targets]
            continue
        src = np.fromiter((p[0] for p in row.assignment), dtype=np.int64, count=len(row.assignment))
        dst = np.fromiter((col_to_idx[p[1]] for p in row.assignment), dtype=np.int64, count=len(row.assignment))
        there = np.ones(src.size, dtype=bool) if occupancy is None else occupancy[r, src].astype(bool)
        arrive = there & (rng.random(src.size) < move_survival)
        out[r, dst] = arrive
        if occupancy is None:
            continue
        # atoms the camera missed that were sitting on target sites
        sources = np.zeros(occupancy.shape[1], dtype=bool)
        sources[src] = True
        hidden = occupancy[r, targets].astype(bool) & ~sources[targets]
        receiving = np.zeros(len(targets), dtype=bool)
        receiving[dst[arrive]] = True
        out[r] |= hidden & ~receiving
        out[r] &= ~(hidden & receiving)
    return out


@dataclass(frozen=True)
class RearrangeConfig:
    move_survival: float = 0.9985
    per_row_us: int = 700
    image_latency_ms: float = 10.0
    buffer_ms: float = 1.6
    storage_roi_extra_ms: float = 15.0
    v_max: float = 1.25
    a_max: float = 2.0e4
    ramp_us: int = 75
    gap_shift_us: int = 25

    def __post_init__(self):
        check_probability(self.move_survival, "move_survival")

    def timing(self, storage_roi: bool = False) -> PlanTiming:
        return PlanTiming(self.image_latency_ms, self.per_row_us, self.buffer_ms,
                          self.storage_roi_extra_ms if storage_roi else 0.0)

    def kinematics(self, site_spacing: float = 4.5e-6) -> MoveKinematics:
        return MoveKinematics(site_spacing, self.v_max, self.a_max, self.ramp_us, self.gap_shift_us)
