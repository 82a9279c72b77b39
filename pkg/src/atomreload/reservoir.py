"""Gaussian reservoir cloud, tweezer loading and local depletion."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.constants import k as K_B
from scipy.special import erf

from atomreload.core import SimError

RB87_MASS = 1.443160648e-25  # kg


class NoReservoirError(SimError):
    """Extraction attempted while no reservoir is in the field of view."""


@dataclass(frozen=True)
class ReservoirState:
    n_atoms: float = 2.5e6
    temperature: float = 120e-6
    omega_r: float = 4998.7  # rad/s, calibrated
    omega_z: float = 2.4427e6  # rad/s, 500 uK lattice at 795.6 nm
    waist: float = 150e-6
    present: bool = True
    arrival_time: int = 0
    lattice_wavelength: float = 795.6e-9
    axial_rms: float = 2.5e-3  # cloud length along the lattice
    mass: float = RB87_MASS
    n_initial: float | None = None  # atom number on arrival; set by fresh()
    budget: float | None = None  # remaining local atom budget
    budget_initial: float | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_atoms < 0:
            raise ValueError("n_atoms must be non-negative")

    @property
    def site_spacing(self) -> float:
        return self.lattice_wavelength / 2

    @property
    def fresh_atoms(self) -> float:
        return self.n_atoms if self.n_initial is None else self.n_initial


@dataclass(frozen=True)
class CloudConfig:
    """Reservoir trap parameters that do not change between deliveries."""

    omega_r: float = 4998.7
    omega_z: float = 2.4427e6
    waist: float = 150e-6
    lattice_wavelength: float = 795.6e-9
    axial_rms: float = 2.5e-3

    def state(self, n_atoms: float, temperature: float, arrival_time: int = 0) -> ReservoirState:
        return ReservoirState(n_atoms=n_atoms, temperature=temperature, omega_r=self.omega_r,
                              omega_z=self.omega_z, waist=self.waist, arrival_time=arrival_time,
                              lattice_wavelength=self.lattice_wavelength, axial_rms=self.axial_rms)


@dataclass(frozen=True)
class TweezerGeometry:
    volume: float = 1e-17
    waist: float = 800e-9
    depth_uK: float = 450.0
    count: int = 1440
    spacing: float = 4.5e-6
    rows: int = 12

    def __post_init__(self):
        if self.volume <= 0:
            raise ValueError("tweezer volume must be positive")

    @property
    def footprint(self) -> float:
        """Half-width of the extraction array along the lattice axis (m)."""
        cols = self.count // self.rows
        return 0.5 * (cols - 1) * self.spacing


@dataclass(frozen=True)
class LoadingModel:
    c_st: float = 1.0
    sigma: float = 9.925e-16  # m^2, calibrated so <gamma> ~ 3e19 m^-3 s^-1
    dwell_ms: float = 0.5
    kappa: float = 5.0
    avg_sites: int = 10
    budget_footprints: float = 2.0

    def __post_init__(self):
        for name in ("c_st", "sigma", "dwell_ms", "kappa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.avg_sites < 1:
            raise ValueError("avg_sites must be >= 1")


def peak_density(res: ReservoirState, n_atoms: float | None = None) -> float:
    n = res.n_atoms if n_atoms is None else n_atoms
    pref = (res.mass / (2 * math.pi * K_B * res.temperature)) ** 1.5
    return n * res.omega_r ** 2 * res.omega_z * pref


def density(res: ReservoirState, r, z, site=0):
    """Atom density (m^-3) in lattice site ``site`` at radius ``r``, axial offset ``z``.

    Each site holds a thermal cloud whose atom number follows the axial
    Gaussian envelope of the whole reservoir, so ``site=0`` is the centre.
    """
    beta = res.mass / (2 * K_B * res.temperature)
    r = np.asarray(r, dtype=float)
    z = np.asarray(z, dtype=float)
    n0 = peak_density(res, site_atoms(res, site))
    return n0 * np.exp(-beta * (res.omega_r ** 2 * r ** 2 + res.omega_z ** 2 * z ** 2))


def site_atoms(res: ReservoirState, site, n_atoms: float | None = None):
    """Atoms in lattice site(s) ``site`` from the axial envelope."""
    n = res.n_atoms if n_atoms is None else n_atoms
    a = res.site_spacing
    x = np.asarray(site, dtype=float) * a
    return n * a / (math.sqrt(2 * math.pi) * res.axial_rms) * np.exp(-0.5 * (x / res.axial_rms) ** 2)


def _central_sites(model: LoadingModel) -> np.ndarray:
    n = model.avg_sites
    return np.arange(n) - n // 2


def lattice_mean_density(res: ReservoirState, model: LoadingModel, n_atoms: float | None = None) -> float:
    """On-axis peak density averaged over the central lattice sites."""
    n_j = site_atoms(res, _central_sites(model), n_atoms)
    return float(np.mean(peak_density(res, n_j)))


def lattice_mean_gamma(res: ReservoirState, model: LoadingModel, n_atoms: float | None = None) -> float:
    """Pair-collision density rate 0.5 n^2 v_rel sigma averaged over sites (m^-3 s^-1)."""
    n_j = site_atoms(res, _central_sites(model), n_atoms)
    n0 = peak_density(res, n_j)
    return float(np.mean(0.5 * n0 ** 2 * relative_speed(res) * model.sigma))


def relative_speed(res: ReservoirState) -> float:
    """Mean relative speed of two thermal atoms."""
    return math.sqrt(16 * K_B * res.temperature / (math.pi * res.mass))


def stochastic_count(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel) -> float:
    return model.c_st * geom.volume * lattice_mean_density(res, model)


def collisional_rate(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel) -> float:
    """Atoms per millisecond per tweezer loaded by pair collisions."""
    return geom.volume * lattice_mean_gamma(res, model) * 1e-3


def local_budget(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel) -> float:
    """Atoms within ``budget_footprints`` array half-widths of the cloud centre."""
    half = model.budget_footprints * geom.footprint
    return res.n_atoms * float(erf(half / (math.sqrt(2) * res.axial_rms)))


def fresh(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel, arrival_time: int = 0) -> ReservoirState:
    """Mark ``res`` as a newly delivered cloud with a full local budget."""
    b = local_budget(res, geom, model)
    return replace(res, n_initial=res.n_atoms, budget=b, budget_initial=b,
                   arrival_time=arrival_time, present=True)


def fresh_mu(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel) -> float:
    """Mean loaded atoms per tweezer for the undepleted cloud."""
    base = replace(res, n_atoms=res.fresh_atoms)
    return stochastic_count(base, geom, model) + collisional_rate(base, geom, model) * model.dwell_ms


def current_mu(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel) -> float:
    if res.budget is None or not res.budget_initial:
        return stochastic_count(res, geom, model) + collisional_rate(res, geom, model) * model.dwell_ms
    if res.fresh_atoms <= 0:
        return 0.0
    return fresh_mu(res, geom, model) * res.budget / res.budget_initial


def sample_extraction(res: ReservoirState, geom: TweezerGeometry, model: LoadingModel,
                      rng: np.random.Generator) -> tuple[np.ndarray, ReservoirState]:
    """Poisson tweezer counts for one extraction plus the depleted reservoir."""
    if not res.present:
        raise NoReservoirError("no reservoir in the field of view")
    if res.budget is None:
        res = fresh(res, geom, model, res.arrival_time)
    mu = current_mu(res, geom, model)
    counts = rng.poisson(mu, size=geom.count).astype(np.int64)
    occupied = int(np.count_nonzero(counts))
    removed = min(model.kappa * occupied, res.budget, res.n_atoms)
    res = replace(res, n_atoms=res.n_atoms - removed, budget=res.budget - removed)
    return counts, res
