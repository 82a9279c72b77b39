"""Environment-dependent T1/T2, pulses, dynamical decoupling and readout estimators."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.optimize import curve_fit

from atomreload.core import AtomArray, AtomRecord, AtomState, SimError, check_probability

US = 1e-6


class DegenerateEstimateError(SimError, ValueError):
    """Estimator denominator pa - pmf is not positive."""


class NonConvergenceError(SimError, RuntimeError):
    pass


@dataclass(frozen=True)
class EnvFlags:
    mot_on: bool = False
    prep_imaging_on: bool = False
    lattice_present: bool = False
    shielding_on: bool = False
    raman_drive_on: bool = False

    @classmethod
    def all_combinations(cls):
        names = [f.name for f in fields(cls)]
        for bits in itertools.product((False, True), repeat=len(names)):
            yield cls(**dict(zip(names, bits)))


# Named measurement conditions.  The two prep conditions run the MOT and
# keep the lattice in, exactly like the calibration measurements.
CONDITIONS = {
    "reference": EnvFlags(),
    "mot": EnvFlags(mot_on=True),
    "prep_unshielded": EnvFlags(mot_on=True, prep_imaging_on=True, lattice_present=True),
    "prep_shielded": EnvFlags(mot_on=True, prep_imaging_on=True, lattice_present=True, shielding_on=True),
    "lattice": EnvFlags(lattice_present=True),
}


@dataclass(frozen=True)
class ShieldingConfig:
    delta_at_hz: float = 10e9
    delta_cool_hz: float = 60e6

    @property
    def suppression(self) -> float:
        return (self.delta_at_hz / self.delta_cool_hz) ** 2


@dataclass(frozen=True)
class CoherenceConfig:
    t2_reference: float = 1.34
    t2_mot: float = 1.15
    t2_shielded_prep: float = 1.09
    t2_unshielded_prep: float = 0.05
    t1_ref_q1: float = 12.6
    t1_mot_q1: float = 12.6
    t1_shielded_q1: float = 3.43
    t1_unshielded_q1: float = 0.2
    t1_lattice_q1: float = 4.0
    q0_t1_factor: float = 2.0
    raman_scatter_t1: float = 0.010
    mf_leak_rate: float = 0.075

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "mf_leak_rate":
                check_probability(v, f.name)
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class Rates:
    """Effective times (s).  Iterates as ``(t1, t2)`` with ``t1`` for |1>."""

    t1: float
    t2: float
    t1_q0: float

    def __iter__(self):
        return iter((self.t1, self.t2))

    @property
    def gammas(self) -> np.ndarray:
        return np.array([1 / self.t1_q0, 1 / self.t1, 1 / self.t2])


def source_rates(cfg: CoherenceConfig, shield: ShieldingConfig) -> dict[str, np.ndarray]:
    """Decay rates (1/s) per source as ``[gamma1_q0, gamma1_q1, gamma2]``.

    The prep-imaging light has a shieldable part and a residual part that
    shielding cannot touch.  Both are fixed by the unshielded and shielded
    calibration conditions (MOT on, lattice in).
    """
    s = shield.suppression
    g2_base = 1 / cfg.t2_reference
    g2_mot = 1 / cfg.t2_mot - g2_base
    g2_lat = 0.0
    g2_prep = (1 / cfg.t2_unshielded_prep - 1 / cfg.t2_shielded_prep) / (1 - 1 / s)
    g2_res = 1 / cfg.t2_shielded_prep - g2_base - g2_mot - g2_lat - g2_prep / s

    g1_base = 1 / cfg.t1_ref_q1
    g1_mot = 1 / cfg.t1_mot_q1 - g1_base
    g1_lat = 1 / cfg.t1_lattice_q1 - g1_base
    g1_prep = (1 / cfg.t1_unshielded_q1 - 1 / cfg.t1_shielded_q1) / (1 - 1 / s)
    g1_res = 1 / cfg.t1_shielded_q1 - g1_base - g1_mot - g1_lat - g1_prep / s
    g_raman = 1 / cfg.raman_scatter_t1

    out = {
        "baseline": (g1_base, g2_base),
        "mot": (g1_mot, g2_mot),
        "lattice": (g1_lat, g2_lat),
        "prep": (g1_prep, g2_prep),
        "prep_residual": (g1_res, g2_res),
        "raman": (g_raman, g_raman),
    }
    for name, (g1, g2) in out.items():
        if g1 < -1e-12 or g2 < -1e-12 or g2_prep < 0:
            raise ValueError(f"coherence times are inconsistent: negative {name} rate")
    q = cfg.q0_t1_factor
    return {k: np.array([max(g1, 0.0) / q, max(g1, 0.0), max(g2, 0.0)]) for k, (g1, g2) in out.items()}


def env_gammas(env: EnvFlags, cfg: CoherenceConfig, shield: ShieldingConfig) -> np.ndarray:
    src = source_rates(cfg, shield)
    g = src["baseline"].copy()
    if env.mot_on:
        g += src["mot"]
    if env.lattice_present:
        g += src["lattice"]
    if env.prep_imaging_on:
        g += src["prep"] / (shield.suppression if env.shielding_on else 1.0)
        g += src["prep_residual"]
    if env.raman_drive_on:
        g += src["raman"]
    return g


def active_rates(env: EnvFlags, cfg: CoherenceConfig | None = None,
                 shield: ShieldingConfig | None = None) -> Rates:
    cfg = cfg or CoherenceConfig()
    shield = shield or ShieldingConfig()
    g = env_gammas(env, cfg, shield)
    return Rates(t1=1 / g[1], t2=1 / g[2], t1_q0=1 / g[0])


@dataclass(frozen=True)
class EnvSchedule:
    """Piecewise-constant environment, repeated with the total segment length as period."""

    segments: tuple[tuple[int, EnvFlags], ...]

    @classmethod
    def constant(cls, env: EnvFlags) -> "EnvSchedule":
        return cls(((1, env),))

    @property
    def period(self) -> int:
        return sum(d for d, _ in self.segments)

    def integrate(self, t0: int, t1: int, cfg: CoherenceConfig, shield: ShieldingConfig) -> np.ndarray:
        """Integral of the decay rates over ``[t0, t1)`` us, dimensionless."""
        if t1 < t0:
            raise ValueError("t1 < t0")
        gam = [env_gammas(e, cfg, shield) for _, e in self.segments]
        if len(self.segments) == 1:
            return gam[0] * (t1 - t0) * US
        total = np.zeros(3)
        bounds = np.cumsum([0] + [d for d, _ in self.segments])
        per_period = sum(g * d for g, (d, _) in zip(gam, self.segments)) * US
        P = self.period
        n0, r0 = divmod(t0, P)
        n1, r1 = divmod(t1, P)
        total += per_period * (n1 - n0)

        def partial(r):
            acc = np.zeros(3)
            for k, (d, _) in enumerate(self.segments):
                lo = bounds[k]
                if r <= lo:
                    break
                acc += gam[k] * (min(r, lo + d) - lo) * US
            return acc

        return total + partial(r1) - partial(r0)


# ---------------------------------------------------------------------------
# state updates on AtomArray (vectorised) and AtomRecord (scalar)


def _decay_vec(bloch: np.ndarray, lam: np.ndarray) -> None:
    """In-place decay by integrated rates ``lam = [L1_q0, L1_q1, L2]``."""
    f2 = math.exp(-lam[2])
    bloch[:, 0] *= f2
    bloch[:, 1] *= f2
    z = bloch[:, 2]
    bloch[:, 2] = np.where(z >= 0, z * math.exp(-lam[0]), z * math.exp(-lam[1]))


def _relabel(atoms: AtomArray, idx: np.ndarray) -> None:
    atoms.state[idx] = np.where(atoms.bloch[idx, 2] >= 0, AtomState.Q0, AtomState.Q1)


def decay(atoms, dt_us: int, rates: Rates, mask: np.ndarray | None = None):
    """Relax transverse coherence with T2 and polarization toward zero with T1.

    T1 is picked by the hemisphere: |0>-side atoms use the Q0 time.
    """
    if dt_us < 0:
        raise ValueError("dt must be non-negative")
    lam = rates.gammas * dt_us * US
    if isinstance(atoms, AtomRecord):
        b = np.array([atoms.bloch], dtype=float)
        if atoms.internal in (AtomState.Q0, AtomState.Q1):
            _decay_vec(b, lam)
        return replace(atoms, bloch=tuple(float(v) for v in b[0]))
    return decay_integrated(atoms, lam, mask)


def decay_integrated(atoms: AtomArray, lam: np.ndarray, mask: np.ndarray | None = None) -> AtomArray:
    sel = atoms.qubit_mask() if mask is None else atoms.qubit_mask() & mask
    idx = np.flatnonzero(sel)
    if idx.size:
        b = atoms.bloch[idx]
        _decay_vec(b, lam)
        atoms.bloch[idx] = b
    return atoms


_KIND_ANGLE = {"pi": math.pi, "pi/2": math.pi / 2}


def _rotate(b: np.ndarray, angle: np.ndarray, phase: float) -> np.ndarray:
    """Rodrigues rotation of rows of ``b`` about (cos phase, sin phase, 0)."""
    k = np.array([math.cos(phase), math.sin(phase), 0.0])
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    kxb = np.cross(k, b)
    kdb = (b @ k)[:, None]
    return b * c + kxb * s + k * kdb * (1 - c)


def apply_pulse(atoms, kind, phase: float, fidelity: float, rng: np.random.Generator,
                jitter: float = 0.0, mask: np.ndarray | None = None):
    """Rotate by ``kind`` ("pi", "pi/2" or an angle in rad) then depolarize with prob 1 - fidelity."""
    check_probability(fidelity, "fidelity")
    angle = _KIND_ANGLE[kind] if isinstance(kind, str) else float(kind)
    if isinstance(atoms, AtomRecord):
        if atoms.internal not in (AtomState.Q0, AtomState.Q1):
            return atoms
        a = np.array([angle * (1 + (jitter * rng.standard_normal() if jitter else 0.0))])
        b = _rotate(np.array([atoms.bloch], dtype=float), a, phase)
        if fidelity < 1 and rng.random() >= fidelity:
            b[:] = 0.0
        state = AtomState.Q0 if b[0, 2] >= 0 else AtomState.Q1
        return replace(atoms, bloch=tuple(float(v) for v in b[0]), internal=state)
    sel = atoms.qubit_mask() if mask is None else atoms.qubit_mask() & mask
    idx = np.flatnonzero(sel)
    if not idx.size:
        return atoms
    a = np.full(idx.size, angle)
    if jitter:
        a *= 1 + jitter * rng.standard_normal(idx.size)
    b = _rotate(atoms.bloch[idx], a, phase)
    if fidelity < 1:
        b[rng.random(idx.size) >= fidelity] = 0.0
    atoms.bloch[idx] = b
    _relabel(atoms, idx)
    return atoms


def mf_leak(atoms: AtomArray, rate: float, rng: np.random.Generator, mask: np.ndarray | None = None) -> AtomArray:
    """Each Q0 atom leaks out of the qubit manifold with probability ``rate``."""
    check_probability(rate, "rate")
    sel = atoms.occupied & (atoms.state == AtomState.Q0)
    if mask is not None:
        sel &= mask
    idx = np.flatnonzero(sel)
    if idx.size and rate > 0:
        hit = idx[rng.random(idx.size) < rate]
        atoms.state[hit] = AtomState.MF_LEAKED
        atoms.bloch[hit] = 0.0
    return atoms


# ---------------------------------------------------------------------------
# dynamical decoupling

XY16_PHASES_DEG = (0, 90, 0, 90, 90, 0, 90, 0, 180, 270, 180, 270, 270, 180, 270, 180)


@dataclass(frozen=True)
class DDSequence:
    n_pi_pulses: int = 64
    spacing_us: int = 1100
    pi_pulse_us: float = 0.5
    fidelity: float = 0.99995
    jitter: float = 0.0

    def __post_init__(self):
        if self.n_pi_pulses % 16:
            raise ValueError("n_pi_pulses must be a multiple of 16")
        if self.spacing_us % 2:
            raise ValueError("spacing_us must be even so tau is an integer")
        check_probability(self.fidelity, "fidelity")

    @property
    def phases(self) -> np.ndarray:
        reps = self.n_pi_pulses // 16
        return np.deg2rad(np.tile(XY16_PHASES_DEG, reps).astype(float))

    @property
    def tau_us(self) -> int:
        return self.spacing_us // 2

    @property
    def length_us(self) -> int:
        return self.n_pi_pulses * self.spacing_us

    def duty(self, cycle_us: int) -> float:
        return self.length_us / cycle_us

    def pulse_error_rate(self) -> float:
        """Transverse decay rate (1/s) contributed by pulse infidelity."""
        return -math.log(self.fidelity) / (self.spacing_us * US) if self.fidelity < 1 else 0.0


def between_pulse_lambda(lam: np.ndarray, seq: DDSequence, dt_us: int) -> np.ndarray:
    """Remove the pulse-error share from T2 so the net decoupled decay matches the configured T2."""
    out = np.array(lam, dtype=float)
    out[2] -= seq.pulse_error_rate() * dt_us * US
    if out[2] < -1e-15:
        raise ValueError("pulse errors alone exceed the configured T2")
    out[2] = max(out[2], 0.0)
    return out


def dd_reload_cycle(atoms: AtomArray, seq: DDSequence, schedule: EnvSchedule, final_phase: float,
                    rng: np.random.Generator, cfg: CoherenceConfig | None = None,
                    shield: ShieldingConfig | None = None, t0_us: int = 0,
                    mask: np.ndarray | None = None, cycle_us: int = 80_000) -> float:
    """X(pi/2), XY16 train, X(final_phase).  Returns the superposition duty fraction.

    ``final_phase`` is the signed rotation angle of the closing pulse:
    -pi/2 maps the initial state back, +pi/2 maps it to the opposite pole.
    """
    cfg = cfg or CoherenceConfig()
    shield = shield or ShieldingConfig()
    tau = seq.tau_us
    apply_pulse(atoms, "pi/2", 0.0, seq.fidelity, rng, seq.jitter, mask)
    t = t0_us
    for k, ph in enumerate(seq.phases):
        step = tau if k == 0 else seq.spacing_us
        lam = schedule.integrate(t, t + step, cfg, shield)
        decay_integrated(atoms, between_pulse_lambda(lam, seq, step), mask)
        t += step
        apply_pulse(atoms, "pi", float(ph), seq.fidelity, rng, seq.jitter, mask)
    lam = schedule.integrate(t, t + tau, cfg, shield)
    decay_integrated(atoms, between_pulse_lambda(lam, seq, tau), mask)
    if final_phase < 0:
        apply_pulse(atoms, abs(final_phase), math.pi, seq.fidelity, rng, seq.jitter, mask)
    else:
        apply_pulse(atoms, final_phase, 0.0, seq.fidelity, rng, seq.jitter, mask)
    return seq.duty(cycle_us)


# ---------------------------------------------------------------------------
# readout and estimators


@dataclass(frozen=True)
class ReadoutCounts:
    p0: float
    p1: float
    pa: float
    pmf: float

    def __post_init__(self):
        for f in fields(self):
            check_probability(getattr(self, f.name), f.name)


def _denominator(c: ReadoutCounts) -> float:
    d = c.pa - c.pmf
    if not d > 0:
        raise DegenerateEstimateError(f"pa ({c.pa}) must exceed pmf ({c.pmf})")
    return d


def contrast(c: ReadoutCounts) -> float:
    return (c.p0 - c.p1) / _denominator(c)


def readout_probability(c: ReadoutCounts) -> float:
    return (c.p0 - c.pmf) / _denominator(c)


def bright_probabilities(atoms: AtomArray, mask: np.ndarray | None = None):
    """Per-atom probabilities of reading bright in the |0> and |1> readouts."""
    sel = atoms.occupied if mask is None else atoms.occupied & mask
    idx = np.flatnonzero(sel)
    st = atoms.state[idx]
    z = atoms.bloch[idx, 2]
    qubit = st <= AtomState.Q1
    leaked = st == AtomState.MF_LEAKED
    p0 = np.where(qubit, (1 + z) / 2, np.where(leaked, 1.0, 0.5))
    p1 = np.where(qubit, (1 - z) / 2, np.where(leaked, 1.0, 0.5))
    return p0, p1, leaked


def expected_readout(atoms: AtomArray, n_ref: int, pmf: float, mask: np.ndarray | None = None) -> ReadoutCounts:
    p0, p1, _ = bright_probabilities(atoms, mask)
    return ReadoutCounts(p0.sum() / n_ref, p1.sum() / n_ref, p0.size / n_ref, pmf)


def sample_readout(atoms: AtomArray, n_ref: int, pmf: float, rng: np.random.Generator,
                   mask: np.ndarray | None = None) -> ReadoutCounts:
    """Bernoulli readout of a snapshot; the atoms themselves are left untouched."""
    p0, p1, _ = bright_probabilities(atoms, mask)
    u = rng.random((2, p0.size))
    return ReadoutCounts(int((u[0] < p0).sum()) / n_ref, int((u[1] < p1).sum()) / n_ref,
                         p0.size / n_ref, pmf)


def fit_1e_time(t, y, max_evals: int = 2000) -> float:
    """Least-squares 1/e time of ``A exp(-t / T)``.

    Returns ``inf`` for series that do not decay (log-linear slope >= 0).
    Raises NonConvergenceError when the optimiser gives up.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 4 or t.size != y.size:
        raise ValueError("need at least 4 (t, y) points")
    if np.any(y <= 0):
        raise ValueError("values must be positive")
    slope, icpt = np.polyfit(t, np.log(y), 1)
    if slope >= 0:
        return math.inf
    try:
        popt, _ = curve_fit(lambda tt, a, k: a * np.exp(-k * tt), t, y, p0=(math.exp(icpt), -slope),
                            maxfev=max_evals)
    except RuntimeError as exc:
        raise NonConvergenceError(str(exc)) from exc
    a, k = popt
    if not np.isfinite(k) or k <= 0:
        if np.isfinite(k) and k <= 0:
            return math.inf
        raise NonConvergenceError(f"fit returned rate {k}")
    return 1.0 / k
