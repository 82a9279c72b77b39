"""Preparation-zone channels: parity projection, imaging, pumping, temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import g as G_ACC
from scipy.constants import k as K_B
from scipy.optimize import minimize_scalar

from atomreload.core import AtomState, ZoneLayout, check_probability, ms_to_us
from atomreload.kernels import recapture_mask
from atomreload.rearrange import ArrayPlan, MoveKinematics, PlanTiming, execute_plan, plan_array
from atomreload.reservoir import RB87_MASS


@dataclass(frozen=True)
class PrepConfig:
    extraction_transport_ms: float = 2.5
    parity_duration_ms: float = 10.0
    double_residual: float = 0.01
    image_duration_ms: float = 10.0
    discriminant_fidelity_site: float = 0.9999
    discriminant_fidelity_avg: float = 0.9993
    imaging_survival: float = 0.995
    detect_dwell_fraction: float = 0.5
    pushout_duration_us: int = 30
    eit_temperature_uK: float = 12.0
    pump_duration_us: float = 50.0
    pump_time_constant_us: float = 5.0
    spam_fidelity: float = 0.981
    b_field_G: float = 4.2
    lattice_parking: bool = True
    parking_penalty: float = 0.05
    talbot_pushout: bool = True
    talbot_penalty: float = 0.0

    def __post_init__(self):
        for name in ("double_residual", "discriminant_fidelity_site", "discriminant_fidelity_avg",
                     "imaging_survival", "detect_dwell_fraction", "spam_fidelity",
                     "parking_penalty", "talbot_penalty"):
            check_probability(getattr(self, name), name)
        for name in ("extraction_transport_ms", "parity_duration_ms", "image_duration_ms",
                     "pushout_duration_us", "pump_duration_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pump_time_constant_us <= 0:
            raise ValueError("pump_time_constant_us must be positive")

    @property
    def effective_imaging_survival(self) -> float:
        s = self.imaging_survival
        if not self.lattice_parking:
            s *= 1 - self.parking_penalty
        if not self.talbot_pushout:
            s *= 1 - self.talbot_penalty
        return s

    @property
    def pump_success(self) -> float:
        raw = 1 - math.exp(-self.pump_duration_us / self.pump_time_constant_us)
        return min(raw, self.spam_fidelity)


def parity_project(raw_counts: np.ndarray, cfg: PrepConfig, rng: np.random.Generator) -> np.ndarray:
    """Pairwise loss leaves count mod 2; a small fraction of multi-loaded sites keep a pair."""
    counts = np.asarray(raw_counts)
    if counts.size and counts.min() < 0:
        raise ValueError("counts must be non-negative")
    occ = (counts % 2).astype(np.int8)
    multi = np.flatnonzero(counts >= 2)
    if multi.size and cfg.double_residual > 0:
        keep = multi[rng.random(multi.size) < cfg.double_residual]
        occ.flat[keep] = 2
    return occ


@dataclass
class ImageResult:
    detections: np.ndarray
    occupancy: np.ndarray


def image(occupancy: np.ndarray, cfg: PrepConfig, rng: np.random.Generator) -> ImageResult:
    """Detect and (mostly) keep atoms.

    A lost atom disappears at a uniform time during the exposure and still
    reads bright if it stayed for at least ``detect_dwell_fraction`` of it.
    Doubles collide as soon as the light is on, so they read dark and vanish.
    """
    occ = np.asarray(occupancy)
    present = occ > 0
    u = rng.random((3,) + occ.shape)
    survive = (occ == 1) & (u[0] < cfg.effective_imaging_survival)
    dwell = np.where(survive, 1.0, np.where(occ == 2, 0.0, u[1]))
    bright = present & (dwell >= cfg.detect_dwell_fraction)
    f = cfg.discriminant_fidelity_site
    det = np.where(bright, u[2] < f, u[2] < 1 - f)
    return ImageResult(det, survive.astype(np.int8))


def initialize_qubits(n: int, cfg: PrepConfig, rng: np.random.Generator) -> np.ndarray:
    """Internal states after optical pumping: Q0 or UNPOLARIZED."""
    ok = rng.random(int(n)) < cfg.pump_success
    return np.where(ok, AtomState.Q0, AtomState.UNPOLARIZED).astype(np.int8)


# ---------------------------------------------------------------------------
# drop and recapture


@dataclass(frozen=True)
class TrapModel:
    depth_uK: float = 370.0
    waist: float = 800e-9
    wavelength: float = 852e-9
    mass: float = RB87_MASS
    gravity_axis: int = 2

    def __post_init__(self):
        if self.depth_uK <= 0:
            raise ValueError("trap depth must be positive")

    @property
    def depth_j(self) -> float:
        return self.depth_uK * 1e-6 * K_B

    @property
    def rayleigh(self) -> float:
        return math.pi * self.waist ** 2 / self.wavelength

    @property
    def omega_r(self) -> float:
        return math.sqrt(4 * self.depth_j / (self.mass * self.waist ** 2))

    @property
    def omega_z(self) -> float:
        return math.sqrt(2 * self.depth_j / (self.mass * self.rayleigh ** 2))

    @property
    def gravity(self) -> np.ndarray:
        g = np.zeros(3)
        g[self.gravity_axis] = -G_ACC
        return g


def _thermal_samples(temperature: float, trap: TrapModel, unit: np.ndarray):
    """Scale unit normals (n, 6) to harmonic-trap positions and velocities; drop unbound ones."""
    s = math.sqrt(K_B * temperature / trap.mass)
    w = np.array([trap.omega_r, trap.omega_r, trap.omega_z])
    pos = unit[:, :3] * (s / w)
    vel = unit[:, 3:] * s
    bound = recapture_mask(pos, vel, 0.0, np.zeros(3), trap.mass, trap.depth_j, trap.waist, trap.rayleigh)
    return pos[bound], vel[bound]


def drop_recapture(temperature: float, trap: TrapModel, release_times_us, samples: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Recaptured fraction after each release time, one sample set shared by all times."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    unit = rng.standard_normal((int(samples), 6))
    return _survival_curve(temperature, trap, release_times_us, unit)


def _survival_curve(temperature, trap, release_times_us, unit):
    pos, vel = _thermal_samples(temperature, trap, unit)
    if pos.shape[0] == 0:
        return np.zeros(len(release_times_us))
    g = trap.gravity
    return np.array([
        recapture_mask(pos, vel, t * 1e-6, g, trap.mass, trap.depth_j, trap.waist, trap.rayleigh).mean()
        for t in release_times_us
    ])


def fit_temperature(release_times_us, survival, trap: TrapModel, samples: int, rng: np.random.Generator,
                    bounds_uK=(0.5, 200.0)) -> float:
    """Least-squares temperature (K) matching a measured recapture curve."""
    unit = rng.standard_normal((int(samples), 6))
    y = np.asarray(survival, dtype=float)

    def cost(t_uK):
        return float(np.sum((_survival_curve(t_uK * 1e-6, trap, release_times_us, unit) - y) ** 2))

    res = minimize_scalar(cost, bounds=bounds_uK, method="bounded", options={"xatol": 1e-3})
    return res.x * 1e-6


# ---------------------------------------------------------------------------
# full preparation sequence


@dataclass
class PreparedBatch:
    occupancy: np.ndarray  # bool, rows x targets (rearranged) or rows x cols
    states: np.ndarray  # int8 internal state per site, LOST where empty
    n_loaded: int
    n_detected: int
    rearranged: bool
    plan: ArrayPlan | None = None

    @property
    def n_atoms(self) -> int:
        return int(self.occupancy.sum())

    @property
    def n_qubits(self) -> int:
        return int(np.count_nonzero(self.states == AtomState.Q0))


@dataclass
class PrepResult:
    batch: PreparedBatch
    elapsed_us: int
    stages: dict = field(default_factory=dict)


def stage_durations(cfg: PrepConfig, rearrange_us: int | None) -> dict:
    st = {
        "extraction_transport": ms_to_us(cfg.extraction_transport_ms),
        "parity": ms_to_us(cfg.parity_duration_ms),
        "image": ms_to_us(cfg.image_duration_ms),
    }
    if rearrange_us is not None:
        st["rearrange"] = int(rearrange_us)
    st["pump"] = int(round(cfg.pump_duration_us))
    return st


def prep_cycle(raw_counts: np.ndarray, layout: ZoneLayout, cfg: PrepConfig, rng: np.random.Generator,
               with_rearrangement: bool, move_survival: float = 0.9985,
               timing: PlanTiming | None = None, kin: MoveKinematics | None = None) -> PrepResult:
    """Run parity projection, imaging, optional rearrangement and pumping on one extraction.

    The lattice handover and the Talbot pushout run inside the parity window,
    so they add no time of their own.
    """
    shape = (layout.prep_rows, layout.prep_cols)
    counts = np.asarray(raw_counts).reshape(shape)
    occ = parity_project(counts, cfg, rng)
    img = image(occ, cfg, rng)
    plan = None
    if with_rearrangement:
        plan = plan_array(img.detections, layout, timing, kin)
        final = execute_plan(plan, move_survival, rng, img.occupancy.astype(bool))
        rearrange_us = plan.total_time_us
    else:
        final = img.occupancy.astype(bool)
        rearrange_us = None
    states = np.full(final.shape, AtomState.LOST, dtype=np.int8)
    states[final] = initialize_qubits(int(final.sum()), cfg, rng)
    stages = stage_durations(cfg, rearrange_us)
    batch = PreparedBatch(final, states, int(np.count_nonzero(occ)), int(img.detections.sum()),
                          with_rearrangement, plan)
    return PrepResult(batch, sum(stages.values()), stages)
