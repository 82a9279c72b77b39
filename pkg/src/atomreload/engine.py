"""Process-style scheduling on top of ``SimClock`` plus the shared simulation context.

Processes are generators.  Yielding an ``int`` sleeps that many
microseconds; yielding a ``Signal`` parks the process until the signal is
fired.  Everything runs on one clock, so interleaving is fully determined by
event times and insertion order.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Generator

import numpy as np

from atomreload.core import SeededRng, SimClock, ms_to_us
from atomreload.events import EventLog
from atomreload.prep import PrepResult, parity_project, prep_cycle
from atomreload.reservoir import ReservoirState, fresh, sample_extraction


class Signal:
    def __init__(self, name: str = "signal"):
        self.name = name
        self.waiters: list = []


class Engine:
    def __init__(self, clock: SimClock | None = None):
        self.clock = clock or SimClock()

    @property
    def now(self) -> int:
        return self.clock.now

    def process(self, gen: Generator, name: str = "proc", delay: int = 0):
        self.clock.schedule(self.now + delay, name, (gen, None))
        return gen

    def fire(self, sig: Signal, value=None):
        waiters, sig.waiters = sig.waiters, []
        for name, gen in waiters:
            self.clock.schedule(self.now, name, (gen, value))

    def _step(self, name, gen, value):
        try:
            cmd = gen.send(value)
        except StopIteration:
            return
        if isinstance(cmd, Signal):
            cmd.waiters.append((name, gen))
        else:
            self.clock.schedule(self.now + int(cmd), name, (gen, None))

    def run(self, until: int | None = None, stop: Signal | None = None):
        """Process events up to ``until`` (inclusive) or until ``stop`` fires."""
        done = [False]
        if stop is not None:
            def watcher():
                yield stop
                done[0] = True
            self.process(watcher(), "stop")
        while len(self.clock) and not done[0]:
            t = self.clock.peek_time()
            if until is not None and t > until:
                break
            _, name, (gen, value) = self.clock.pop()
            self._step(name, gen, value)
        if until is not None and not done[0] and self.clock.now < until:
            self.clock.advance(until)


class ReservoirSupply:
    """MOT/Lattice-1 process feeding Lattice-2 deliveries into the science region.

    A ready cloud is handed over right after the next extraction dwell ends,
    so the 21 ms delivery gap falls into the prep sequence instead of
    delaying an extraction.
    """

    def __init__(self, sim: "Simulation"):
        self.sim = sim
        self.current: ReservoirState | None = None
        self.arrived = Signal("arrived")
        self.extracted = Signal("extracted")
        self.n_delivered = 0
        self.parked = False
        sim.engine.process(self._mot_loop(), "mot")

    def _mot_loop(self):
        sim = self.sim
        tm = sim.cfg.timings
        k = 0
        while True:
            mot_start = sim.now
            sim.emit("transport", "MOT_START", reservoir=k)
            yield tm.ready_us
            sim.emit("transport", "CLOUD_READY", reservoir=k)
            if self.current is not None:
                yield self.extracted
            yield tm.handover_us
            if self.current is not None:
                sim.emit("transport", "GAP_START", reservoir=k - 1)
            self.current = None
            sim.engine.process(self._deliver(k), "lattice2")
            nxt = max(sim.now, mot_start + tm.period_us)
            yield nxt - sim.now
            k += 1

    def _deliver(self, k):
        sim = self.sim
        yield sim.cfg.timings.l2_us
        n, temp = sim.cfg.transfer.apply()
        res = sim.cfg.cloud.state(n, temp, sim.now)
        self.current = fresh(res, sim.cfg.tweezers, sim.cfg.loading, sim.now)
        self.parked = False
        self.n_delivered += 1
        sim.emit("transport", "ARRIVAL", reservoir=k, n_atoms=round(n))
        sim.engine.fire(self.arrived)


class Simulation:
    """Shared context for one trial: clock, RNG streams, log and the reservoir supply."""

    def __init__(self, cfg, seed: int = 0, trial: int = 0, log: EventLog | None = None,
                 supply: bool = True):
        self.cfg = cfg
        self.seed = int(seed)
        self.trial = int(trial)
        self.engine = Engine()
        self.log = log or EventLog(None)
        self._rngs: dict[str, np.random.Generator] = {}
        self.supply = ReservoirSupply(self) if supply else None

    @property
    def now(self) -> int:
        return self.engine.now

    def rng(self, module: str) -> np.random.Generator:
        if module not in self._rngs:
            self._rngs[module] = SeededRng.for_module(self.seed, self.trial, module).generator()
        return self._rngs[module]

    def emit(self, module: str, tag: str, **payload):
        self.log.record(self.now, module, tag, **payload)

    # -- shared process fragments -------------------------------------------

    def extract(self, park: bool = False):
        """Wait for a reservoir, extract once and dwell.  Returns raw counts."""
        sup = self.supply
        while sup.current is None:
            self.emit("reservoir", "WAIT_RESERVOIR")
            yield sup.arrived
        if sup.parked:
            sup.parked = False
            self.emit("reservoir", "RETURN", shuttle_us=self.cfg.timings.shuttle_us)
        counts, sup.current = sample_extraction(sup.current, self.cfg.tweezers, self.cfg.loading,
                                                self.rng("reservoir"))
        self.emit("reservoir", "EXTRACT", loaded_sites=int(np.count_nonzero(counts)),
                  raw_atoms=int(counts.sum()), budget=round(float(sup.current.budget), 1))
        yield ms_to_us(self.cfg.loading.dwell_ms)
        if park and self.cfg.prep.lattice_parking:
            sup.parked = True
            self.emit("reservoir", "PARK", shuttle_us=self.cfg.timings.shuttle_us)
        self.engine.fire(sup.extracted)
        return counts

    def prepare(self, layout, with_rearrangement: bool, storage_roi: bool = False):
        """Extraction plus the full prep sequence.  Returns ``(PrepResult, start_us)``."""
        start = None
        sup = self.supply
        while sup.current is None:
            self.emit("reservoir", "WAIT_RESERVOIR")
            yield sup.arrived
        start = self.now
        counts = yield from self.extract(park=True)
        rc = self.cfg.rearrange
        res: PrepResult = prep_cycle(counts, layout, self.cfg.prep, self.rng("prep"), with_rearrangement,
                                     rc.move_survival, rc.timing(storage_roi),
                                     rc.kinematics(layout.prep_spacing))
        yield res.elapsed_us - (self.now - start)
        b = res.batch
        self.emit("prep", "BATCH", atoms=b.n_atoms, qubits=b.n_qubits, loaded=b.n_loaded,
                  detected=b.n_detected, rearranged=int(b.rearranged), elapsed_us=res.elapsed_us,
                  start_us=start)
        return res, start


def parity_atoms(counts, cfg, rng) -> int:
    return int(parity_project(counts, cfg, rng).sum())
