"""Storage-array assembly, round-robin subarray refill and continuous operation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from atomreload.coherence import (
    CONDITIONS,
    DDSequence,
    EnvSchedule,
    active_rates,
    dd_reload_cycle,
    decay_integrated,
    mf_leak,
    readout_probability,
    sample_readout,
    DegenerateEstimateError,
)
from atomreload.core import AtomArray, AtomState, ZoneLayout, check_probability, ms_to_us, survive_exponential
from atomreload.engine import Signal, Simulation
from atomreload.prep import PreparedBatch

MODES = ("atoms", "z", "x")


@dataclass(frozen=True)
class ReloadCycleConfig:
    cycle_period_ms: float = 80.0
    eject_duration_ms: float = 5.0
    transfer_ms: float = 2.0
    transfer_survival: float = 0.9923
    sync_transfer: bool = True
    sync_penalty: float = 0.02
    lifetime_s: float = 60.0
    batch_size: int = 540
    replenish: bool = True
    sample_every: int = 1
    environment: str = "prep_shielded"
    final_phase: str = "return"  # "return" maps back to |0>, "alternate" flips every other subarray

    def __post_init__(self):
        check_probability(self.transfer_survival, "transfer_survival")
        check_probability(self.sync_penalty, "sync_penalty")
        if self.lifetime_s <= 0 or self.cycle_period_ms <= 0:
            raise ValueError("lifetime and cycle period must be positive")
        if self.environment not in CONDITIONS:
            raise ValueError(f"environment must be one of {sorted(CONDITIONS)}")
        if self.final_phase not in ("return", "alternate"):
            raise ValueError("final_phase must be 'return' or 'alternate'")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")

    @property
    def cycle_us(self) -> int:
        return ms_to_us(self.cycle_period_ms)

    @property
    def eject_us(self) -> int:
        return ms_to_us(self.eject_duration_ms)

    @property
    def effective_transfer(self) -> float:
        return self.transfer_survival * (1.0 if self.sync_transfer else 1 - self.sync_penalty)


@dataclass
class StorageState:
    atoms: AtomArray
    layout: ZoneLayout
    refill_time: np.ndarray  # us, -1 before first fill
    n_ref: np.ndarray  # atoms placed at last refill, per subarray
    pmf: np.ndarray  # leaked fraction right after last refill, per subarray
    cycle_index: int = 0
    next_subarray: int = 0
    last_update: int = 0
    cycled: int = 0  # atoms placed into storage so far
    ejected: int = 0

    @classmethod
    def empty(cls, layout: ZoneLayout, now: int = 0) -> "StorageState":
        n = layout.n_subarrays
        return cls(AtomArray(layout.storage_sites, "storage"), layout, np.full(n, -1, dtype=np.int64),
                   np.zeros(n, dtype=np.int64), np.zeros(n), last_update=now)

    @property
    def population(self) -> int:
        return self.atoms.population

    def ages(self, now: int) -> np.ndarray:
        return np.where(self.refill_time >= 0, now - self.refill_time, -1)

    def oldest(self) -> int:
        never = np.flatnonzero(self.refill_time < 0)
        if never.size:
            return int(never[0])
        return int(np.argmin(self.refill_time))


def steady_state_population(layout: ZoneLayout, refill_fill: float, cycle_s: float, lifetime_s: float,
                            sample_offset_s: float | None = None) -> float:
    """Mean population sampled ``sample_offset_s`` into each cycle (default mid-cycle)."""
    off = cycle_s / 2 if sample_offset_s is None else sample_offset_s
    ages = off + cycle_s * np.arange(layout.n_subarrays)
    return layout.storage_sites * refill_fill * float(np.mean(np.exp(-ages / lifetime_s)))


def transfer_batch(state: StorageState, k: int, batch: PreparedBatch, sim: Simulation,
                   cfg: ReloadCycleConfig) -> int:
    """Move a rearranged batch into subarray ``k``; returns atoms placed."""
    sites = state.layout.subarray_sites_of(k)
    occ = batch.occupancy.ravel()
    if occ.size != sites.size:
        raise ValueError(f"batch has {occ.size} sites, subarray has {sites.size}")
    rng = sim.rng("storage")
    keep = occ & (rng.random(occ.size) < cfg.effective_transfer)
    dest = sites[keep]
    state.atoms.place(dest, batch.states.ravel()[keep], sim.now)
    mask = np.zeros(state.atoms.n_sites, dtype=bool)
    mask[dest] = True
    mf_leak(state.atoms, sim.cfg.coherence.mf_leak_rate, sim.rng("coherence"), mask)
    n = int(dest.size)
    state.refill_time[k] = sim.now
    state.n_ref[k] = n
    leaked = int(np.count_nonzero(state.atoms.state[dest] == AtomState.MF_LEAKED))
    state.pmf[k] = leaked / n if n else 0.0
    state.cycled += n
    return n


def eject(state: StorageState, k: int) -> int:
    n = state.atoms.remove(state.layout.subarray_sites_of(k))
    state.ejected += n
    return n


class StorageRunner:
    """Drives assembly and reload cycles as one process on the simulation clock."""

    def __init__(self, sim: Simulation, cfg: ReloadCycleConfig | None = None, mode: str = "atoms",
                 layout: ZoneLayout | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.sim = sim
        self.cfg = cfg or sim.cfg.storage
        self.mode = mode
        self.layout = layout or sim.cfg.layout
        self.state = StorageState.empty(self.layout, sim.now)
        env = CONDITIONS[self.cfg.environment]
        self.schedule = EnvSchedule.constant(env)
        self.rates = active_rates(env, sim.cfg.coherence, sim.cfg.shielding)
        self.dd: DDSequence = sim.cfg.dd
        self.series: list[dict] = []
        self.subarray_series: list[dict] = []
        self.assembly_elapsed_us: int | None = None
        self.assembly_population: int | None = None
        self._batch_ready = Signal("batch_ready")
        self._batch: PreparedBatch | None = None
        self._want_batch = True
        self._prep_start: int | None = None
        self._last_coh = sim.now
        self.duty = self.dd.duty(self.cfg.cycle_us)
        self.not_ready = 0
        self.refill_log: list[tuple[int, int]] = []
        self.continuous_start_us: int | None = None
        self.assembly_placed = 0

    # -- background physics ---------------------------------------------------

    def _advance(self):
        """Background loss and free evolution up to now.

        Coherence has its own timestamp because a decoupling window is
        applied in one step at its start and already contains the decay.
        """
        st = self.state
        now = self.sim.now
        if now > st.last_update:
            survive_exponential(st.atoms, now - st.last_update, self.cfg.lifetime_s, self.sim.rng("storage"))
            st.last_update = now
        if self.mode != "atoms" and now > self._last_coh:
            lam = self.schedule.integrate(self._last_coh, now, self.sim.cfg.coherence, self.sim.cfg.shielding)
            decay_integrated(st.atoms, lam)
        self._last_coh = max(self._last_coh, now)

    # -- prep side ------------------------------------------------------------

    def _prep_loop(self):
        sim = self.sim
        while True:
            if not self._want_batch:
                yield self._need_batch
            self._want_batch = False
            res, start = yield from sim.prepare(self.layout, True, storage_roi=True)
            if self._prep_start is None:
                self._prep_start = start
            yield ms_to_us(self.cfg.transfer_ms)
            self._batch = res.batch
            sim.engine.fire(self._batch_ready)

    def _take_batch(self):
        while self._batch is None:
            yield self._batch_ready
        b, self._batch = self._batch, None
        self._want_batch = True
        self.sim.engine.fire(self._need_batch)
        return b

    # -- storage side ---------------------------------------------------------

    def _sample(self, tag="SAMPLE"):
        st = self.state
        row = {"t_us": self.sim.now, "population": st.population, "mean_polarization": "", "mean_contrast": ""}
        if self.mode == "z":
            occ = st.atoms.occupied
            z = np.where(st.atoms.state[occ] <= AtomState.Q1, st.atoms.bloch[occ, 2], 0.0)
            row["mean_polarization"] = float(z.mean()) if z.size else 0.0
        self.series.append(row)
        self.sim.emit("storage", tag, population=st.population, cycle=st.cycle_index)
        return row

    def _refill(self, batch: PreparedBatch, k: int):
        self._advance()
        n = transfer_batch(self.state, k, batch, self.sim, self.cfg)
        self.refill_log.append((self.sim.now, n))
        self.sim.emit("storage", "REFILL", subarray=k, placed=n, batch_atoms=batch.n_atoms,
                      population=self.state.population)

    def _readout_x(self) -> float:
        """Per-subarray readout probability after the closing pulse (virtual readout)."""
        st = self.state
        rng = self.sim.rng("readout")
        sub = self.layout.subarray_of(np.arange(st.atoms.n_sites))
        vals = []
        for k in range(self.layout.n_subarrays):
            if st.n_ref[k] == 0:
                continue
            counts = sample_readout(st.atoms, int(st.n_ref[k]), float(st.pmf[k]), rng, sub == k)
            try:
                rp = readout_probability(counts)
            except DegenerateEstimateError:
                continue
            age = int((self.sim.now - st.refill_time[k]) // self.cfg.cycle_us) + 1
            self.subarray_series.append({"t_us": self.sim.now, "cycle": st.cycle_index, "subarray": k,
                                         "age_cycles": age, "refill_us": int(st.refill_time[k]),
                                         "readout_probability": rp,
                                         "p0": counts.p0, "pa": counts.pa, "pmf": counts.pmf})
            self.sim.emit("coherence", "READOUT", subarray=k, age_cycles=age, readout_probability=rp)
            vals.append(rp)
        return float(np.mean(vals)) if vals else float("nan")

    def _final_angle(self, k_cycle: int) -> float:
        if self.cfg.final_phase == "alternate" and k_cycle % 2:
            return math.pi / 2
        return -math.pi / 2

    def _assemble(self):
        sim = self.sim
        n_sub = self.layout.n_subarrays
        t_first = None
        for k in range(n_sub):
            batch = yield from self._take_batch()
            if t_first is None:
                t_first = self._prep_start
            target = t_first + (k + 1) * self.cfg.cycle_us
            yield max(0, target - sim.now)
            self._refill(batch, k)
        self.assembly_elapsed_us = sim.now - t_first
        self.assembly_population = self.state.population
        self.assembly_placed = self.state.cycled
        self.continuous_start_us = sim.now
        sim.emit("storage", "ASSEMBLED", population=self.state.population, elapsed_us=self.assembly_elapsed_us)
        self.state.next_subarray = 0
        self._sample()

    def _cycle_once(self):
        sim = self.sim
        cfg = self.cfg
        st = self.state
        t0 = sim.now
        marks = {t0 + cfg.cycle_us // 2: "sample"}
        if self.mode == "x":
            self._advance()
            dd_reload_cycle(st.atoms, self.dd, self.schedule, self._final_angle(st.cycle_index),
                            sim.rng("coherence"), sim.cfg.coherence, sim.cfg.shielding, t0_us=t0,
                            cycle_us=cfg.cycle_us)
            self._last_coh = t0 + self.dd.length_us
            marks[t0 + self.dd.length_us] = "readout"
        row = None
        for m in sorted(marks):
            yield max(0, m - sim.now)
            self._advance()
            if marks[m] == "sample":
                if st.cycle_index % cfg.sample_every == 0:
                    row = self._sample()
            else:
                val = self._readout_x()
                if row is not None:
                    row["mean_contrast"] = val
        nxt = t0 + cfg.cycle_us
        if cfg.replenish:
            k = st.next_subarray
            yield max(0, nxt - cfg.eject_us - sim.now)
            self._advance()
            sim.emit("storage", "EJECT", subarray=k, removed=eject(st, k))
            if self._batch is None:
                yield max(0, nxt - sim.now)
                if self._batch is None:
                    self.not_ready += 1
                    sim.emit("storage", "BATCH_NOT_READY", subarray=k)
            batch = yield from self._take_batch()
            yield max(0, nxt - sim.now)
            self._refill(batch, k)
            st.next_subarray = (k + 1) % self.layout.n_subarrays
        else:
            yield max(0, nxt - sim.now)
            self._advance()
        st.cycle_index += 1

    def start(self):
        self._need_batch = Signal("need_batch")
        self.sim.engine.process(self._prep_loop(), "prep")

    def run(self, duration_us: int, done: Signal):
        """Generator: assemble, then cycle for ``duration_us``."""
        self.start()
        yield from self._assemble()
        end = self.sim.now + int(duration_us)
        while self.sim.now < end:
            yield from self._cycle_once()
        self.sim.engine.fire(done)


def assemble(sim: Simulation, cfg: ReloadCycleConfig | None = None, mode: str = "atoms"):
    """Fill all six subarrays.  Returns ``(runner, elapsed_us)``; the runner holds the state."""
    runner = StorageRunner(sim, cfg, mode)
    done = Signal("done")
    sim.engine.process(runner.run(0, done), "storage")
    sim.engine.run(stop=done)
    return runner, runner.assembly_elapsed_us


def run_continuous(duration_us: int, mode: str, sim: Simulation, cfg: ReloadCycleConfig | None = None):
    """Assemble then cycle for ``duration_us``; returns the runner with its series."""
    runner = StorageRunner(sim, cfg, mode)
    done = Signal("done")
    sim.engine.process(runner.run(int(duration_us), done), "storage")
    sim.engine.run(stop=done)
    return runner


def reload_cycle(runner: StorageRunner) -> StorageState:
    """Advance an assembled runner by exactly one reload cycle."""
    sim = runner.sim
    done = Signal("done")
    start = runner.state.cycle_index

    def one():
        yield from runner._cycle_once()
        sim.engine.fire(done)

    sim.engine.process(one(), "storage")
    sim.engine.run(stop=done)
    assert runner.state.cycle_index == start + 1
    return runner.state
