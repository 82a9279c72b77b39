"""Experiment drivers, aggregation and output files."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from atomreload.coherence import (
    CONDITIONS,
    DDSequence,
    XY16_PHASES_DEG,
    EnvSchedule,
    ReadoutCounts,
    active_rates,
    apply_pulse,
    between_pulse_lambda,
    contrast,
    decay_integrated,
    fit_1e_time,
    mf_leak,
    sample_readout,
    NonConvergenceError,
)
from atomreload.core import AtomArray, AtomState, SeededRng, ZoneLayout, ms_to_us, survive_exponential, us
from atomreload.engine import Signal, Simulation
from atomreload.events import FORMAT_VERSION, EventLog
from atomreload.prep import drop_recapture, fit_temperature, initialize_qubits, parity_project, prep_cycle
from atomreload.reservoir import fresh, sample_extraction
from atomreload.storage import StorageRunner, steady_state_population
from atomreload.transport import pipeline_timeline, write_timeline_csv

VERSION_LINE = f"# format_version={FORMAT_VERSION}"


def replenishment_requirement(n_physical: float, layer_time: float, loss_per_layer: float) -> float:
    """Qubits per second needed to replace atoms lost while running layers of operations."""
    if n_physical < 0 or layer_time <= 0 or not 0 <= loss_per_layer <= 1:
        raise ValueError("need n_physical >= 0, layer_time > 0, 0 <= loss_per_layer <= 1")
    return n_physical * loss_per_layer / layer_time


# ---------------------------------------------------------------------------
# output helpers


class OutputError(OSError):
    pass


def _open(path, mode="w"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def write_csv(path, header, rows) -> None:
    with _open(path) as fh:
        fh.write(VERSION_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            vals = [r[h] for h in header] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in vals])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return o


def write_json(path, obj) -> None:
    with _open(path) as fh:
        json.dump({"format_version": FORMAT_VERSION, **_jsonable(obj)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


class TrialLog:
    """Per-trial event log file, or a counting-only log when no directory is given."""

    def __init__(self, outdir, trial: int):
        self.fh = None
        if outdir is not None:
            self.fh = _open(Path(outdir) / f"events_trial{trial:03d}.jsonl")
        self.log = EventLog(self.fh, trial)

    def __enter__(self):
        return self.log

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


def emit(log_counts, series: dict, summaries: dict, outdir) -> list[str]:
    """Write time series CSVs and the JSON summary.  Event logs are streamed during the run."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in series.items():
        write_csv(out / f"{name}.csv", header, rows)
        written.append(f"{name}.csv")
    write_json(out / "summary.json", {**summaries, "events_logged": log_counts})
    written.append("summary.json")
    return written


def run_trials(fn, cfg, seeds_trials, outdir, workers: int = 1, **kw):
    """Run ``fn(cfg, seed, trial, outdir, **kw)`` for each trial; results come back in trial order."""
    jobs = [(cfg, s, t, outdir) for s, t in seeds_trials]
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j, **kw) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, *j, **kw) for j in jobs]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# flux


def _flux_atoms(sim: Simulation, duration_us: int, period_us: int, rows: list):
    sup = sim.supply
    while sup.current is None:
        yield sup.arrived
    t0 = sim.now
    end = t0 + duration_us
    sim.emit("metrics", "WINDOW", mode="atoms", start_us=t0, end_us=end)
    total = 0
    while sim.now < end:
        start = sim.now
        counts = yield from sim.extract()
        if start >= end:
            break
        atoms = int(parity_project(counts, sim.cfg.prep, sim.rng("prep")).sum())
        total += atoms
        sim.emit("metrics", "COUNT", mode="atoms", atoms=atoms, start_us=start)
        rows.append({"t_us": start - t0, "mode": "atoms", "cumulative": total})
        yield max(0, start + period_us - sim.now)
    return total, t0


def _flux_qubits(sim: Simulation, duration_us: int, layout: ZoneLayout, rearrange: bool, rows: list):
    sup = sim.supply
    while sup.current is None:
        yield sup.arrived
    t0 = sim.now
    end = t0 + duration_us
    mode = "qubits_rearranged" if rearrange else "qubits_plain"
    sim.emit("metrics", "WINDOW", mode=mode, start_us=t0, end_us=end)
    total = 0
    while sim.now < end:
        res, start = yield from sim.prepare(layout, rearrange)
        if start >= end:
            break
        total += res.batch.n_atoms
        sim.emit("metrics", "COUNT", mode=mode, atoms=res.batch.n_atoms, start_us=start)
        rows.append({"t_us": sim.now - t0, "mode": mode, "cumulative": total})
    return total, t0


def run_flux(cfg, seed: int = 0, trial: int = 0, outdir=None) -> dict:
    """Atom flux and qubit flux (plain and rearranged) over ``flux.duration_s`` from first arrival."""
    fc = cfg.flux
    D = us(fc.duration_s)
    rows: list[dict] = []
    out = {}
    with TrialLog(outdir, trial) as log:
        for mode in ("atoms", "qubits_plain", "qubits_rearranged"):
            sim = Simulation(cfg, seed, trial, log=_ShiftLog(log))
            done = Signal()
            result = {}

            def proc(mode=mode, sim=sim, done=done, result=result):
                if mode == "atoms":
                    r = yield from _flux_atoms(sim, D, ms_to_us(fc.extraction_period_ms), rows)
                elif mode == "qubits_plain":
                    r = yield from _flux_qubits(sim, D, cfg.layout, False, rows)
                else:
                    lay = replace(cfg.layout, target_sites=fc.batch_targets)
                    r = yield from _flux_qubits(sim, D, lay, True, rows)
                result["total"], result["t0"] = r
                sim.engine.fire(done)

            sim.engine.process(proc(), "flux")
            sim.engine.run(stop=done)
            out[mode] = {"total": result["total"], "window_us": D, "start_us": result["t0"],
                         "per_s": result["total"] / fc.duration_s, "reservoirs": sim.supply.n_delivered}
            log.offset = log.last_time + 1 if log.last_time is not None else 0
        n_events = log.count
    return {"trial": trial, "seed": seed, "modes": out, "rows": rows, "events": n_events}


def summarize_flux(results) -> dict:
    modes = results[0]["modes"].keys()
    return {
        "trials": len(results),
        "per_s": {m: float(np.mean([r["modes"][m]["per_s"] for r in results])) for m in modes},
        "totals": {m: [r["modes"][m]["total"] for r in results] for m in modes},
        "window_us": results[0]["modes"]["atoms"]["window_us"],
    }


class _ShiftLog:
    """Shares one trial log between consecutive simulations by offsetting their clocks."""

    def __init__(self, log: EventLog):
        self.log = log
        if not hasattr(log, "offset"):
            log.offset = 0

    @property
    def count(self):
        return self.log.count

    def record(self, time_us, module, tag, **payload):
        self.log.record(time_us + self.log.offset, module, tag, sim_us=time_us, **payload)


# ---------------------------------------------------------------------------
# depletion


def run_depletion(cfg, seed: int = 0, trial: int = 0, outdir=None) -> dict:
    dc = cfg.depletion
    with TrialLog(outdir, trial) as log:
        sim = Simulation(cfg, seed, trial, log=log, supply=False)
        n, temp = cfg.transfer.apply()
        res = fresh(cfg.cloud.state(n, temp), cfg.tweezers, cfg.loading)
        period = ms_to_us(dc.period_ms)
        fills = np.zeros(dc.n_extractions)
        atoms = np.zeros(dc.n_extractions, dtype=np.int64)
        for i in range(dc.n_extractions):
            sim.engine.clock.advance(i * period)
            counts, res = sample_extraction(res, cfg.tweezers, cfg.loading, sim.rng("reservoir"))
            occ = parity_project(counts, cfg.prep, sim.rng("prep"))
            fills[i] = np.count_nonzero(occ) / occ.size
            atoms[i] = int(occ.sum())
            sim.emit("reservoir", "EXTRACT", index=i + 1, occupied_sites=int(np.count_nonzero(occ)),
                     atoms=int(atoms[i]), budget=round(float(res.budget), 1))
        n_events = log.count
    return {"trial": trial, "seed": seed, "fills": fills, "atoms": atoms, "events": n_events}


def summarize_depletion(results, cfg) -> tuple[dict, list]:
    fills = np.mean([r["fills"] for r in results], axis=0)
    atoms = np.mean([r["atoms"] for r in results], axis=0)
    initial = float(fills[0])
    below = np.flatnonzero(fills < initial / 2)
    half_at = int(below[0] + 1) if below.size else None
    rows = [{"extraction": i + 1, "fill_mean": float(f), "cumulative_atoms": float(c)}
            for i, (f, c) in enumerate(zip(fills, np.cumsum(atoms)))]
    summary = {
        "trials": len(results),
        "initial_fill": initial,
        "half_fill_extraction": half_at,
        "first30_mean_fill": float(fills[:30].mean()),
        "reference_fill": 0.5,
        "reference_atoms_per_extraction": 0.5 * cfg.tweezers.count,
    }
    return summary, rows


# ---------------------------------------------------------------------------
# maintenance


def run_maintenance(cfg, seed: int = 0, trial: int = 0, outdir=None, duration_s: float | None = None,
                    mode: str | None = None) -> dict:
    mc = cfg.maintain
    duration_s = mc.duration_s if duration_s is None else duration_s
    mode = mode or mc.mode
    with TrialLog(outdir, trial) as log:
        sim = Simulation(cfg, seed, trial, log=log)
        runner = StorageRunner(sim, cfg.storage, mode)
        done = Signal()
        sim.engine.process(runner.run(us(duration_s), done), "storage")
        sim.engine.run(stop=done)
        n_events = log.count
    return summarize_maintenance(runner, cfg, duration_s, mode) | {
        "trial": trial, "seed": seed, "events": n_events,
        "series": runner.series, "subarray_series": runner.subarray_series}


def summarize_maintenance(runner: StorageRunner, cfg, duration_s: float, mode: str) -> dict:
    sc = cfg.storage
    series = runner.series
    pops = np.array([r["population"] for r in series], dtype=float)
    t = np.array([r["t_us"] for r in series], dtype=float)
    st = runner.state
    n_sub = runner.layout.n_subarrays
    # refill fill in steady state (skip the assembly refills)
    steady = pops[n_sub:] if pops.size > n_sub else pops
    sim_s = (t[-1] - t[0]) / 1e6 if t.size > 1 else 0.0
    out = {
        "mode": mode,
        "duration_s": duration_s,
        "assembly_population": runner.assembly_population,
        "assembly_elapsed_us": runner.assembly_elapsed_us,
        "min_population": int(pops.min()) if pops.size else None,
        "steady_state_mean": float(steady.mean()) if steady.size else None,
        "cycles": st.cycle_index,
        "cumulative_atoms_cycled": st.cycled,
        "batch_not_ready": runner.not_ready,
        "duty_fraction": runner.duty if mode == "x" else None,
    }
    refills = runner.refill_log
    if sc.replenish and len(refills) > n_sub:
        F = float(np.mean([p for _, p in refills[n_sub:]])) / runner.layout.subarray_sites
        out["mean_refill_fill"] = F
        out["steady_state_closed_form"] = steady_state_population(
            runner.layout, F, sc.cycle_period_ms / 1e3, sc.lifetime_s)
        rate = (st.cycled - runner.assembly_placed) / max(sim_s, 1e-9)
        out["cycled_per_s"] = rate
        out["extrapolated_cycled"] = rate * cfg.maintain.extrapolate_hours * 3600
    if not sc.replenish and pops.size >= 4 and pops.min() > 0:
        try:
            out["fitted_lifetime_s"] = fit_1e_time((t - t[0]) / 1e6, pops)
        except NonConvergenceError:
            out["fitted_lifetime_s"] = None
    if mode == "x":
        out["t2_configured"] = runner.rates.t2
        out["t2_sawtooth_fit"] = sawtooth_t2(runner)
    return out


def sawtooth_t2(runner: StorageRunner) -> float | None:
    """Fit (readout probability - 1/2) against accumulated superposition time."""
    rows = [r for r in runner.subarray_series if r["refill_us"] >= runner.continuous_start_us]
    if not rows:
        return None
    ages = sorted({r["age_cycles"] for r in rows})
    y = np.array([np.mean([r["readout_probability"] - 0.5 for r in rows if r["age_cycles"] == a]) for a in ages])
    tt = np.array(ages) * runner.dd.length_us / 1e6
    if len(ages) < 4 or np.any(y <= 0):
        return None
    try:
        return fit_1e_time(tt, y)
    except NonConvergenceError:
        return None


# ---------------------------------------------------------------------------
# coherence scans


def _prepare_atoms(n: int, cfg, rng) -> tuple[AtomArray, float]:
    atoms = AtomArray(n, "storage")
    states = initialize_qubits(n, cfg.prep, rng)
    atoms.place(np.arange(n), states, 0)
    mf_leak(atoms, cfg.coherence.mf_leak_rate, rng)
    pmf = float(np.count_nonzero(atoms.state == AtomState.MF_LEAKED)) / n
    return atoms, pmf


def _scan_times_us(kind: str, t_expected: float, sc, seq: DDSequence) -> np.ndarray:
    span = sc.span * t_expected
    if kind == "t2":
        unit = 4 * sc.t2_spacing_us  # whole XY4 units keep the train refocusing
        n_units = max(int(span * 1e6 // unit), sc.points - 1)
        k = np.unique(np.round(np.linspace(0, n_units, sc.points)).astype(np.int64))
        return k * unit
    return np.unique(np.round(np.linspace(0, span, sc.points) * 1e6).astype(np.int64))


def coherence_scan_trial(cfg, condition: str, kind: str, seed: int, trial: int) -> list[ReadoutCounts]:
    """One trial of a T2 (``t2``) or T1 (``t1_q1``/``t1_q0``) scan; returns counts per time point."""
    env = CONDITIONS[condition]
    rates = active_rates(env, cfg.coherence, cfg.shielding)
    sched = EnvSchedule.constant(env)
    sc = cfg.scan
    seq = replace(cfg.dd, spacing_us=sc.t2_spacing_us)
    name = f"scan:{condition}:{kind}"
    rng = SeededRng.for_module(seed, trial, name).generator()
    rrng = SeededRng.for_module(seed, trial, name + ":readout").generator()
    atoms, pmf = _prepare_atoms(sc.atoms, cfg, rng)
    n_ref = sc.atoms
    t_exp = {"t2": rates.t2, "t1_q1": rates.t1, "t1_q0": rates.t1_q0}[kind]
    times = _scan_times_us(kind, t_exp, sc, seq)
    lifetime = cfg.storage.lifetime_s
    out = []
    now = 0
    if kind == "t1_q1":
        apply_pulse(atoms, "pi", 0.0, seq.fidelity, rng)
    if kind == "t2":
        apply_pulse(atoms, "pi/2", 0.0, seq.fidelity, rng)
        phases = np.deg2rad(np.asarray(XY16_PHASES_DEG, dtype=float))
        tau = seq.spacing_us // 2
        pulse_i = 0
        for t in times:
            while now < t:
                lam = sched.integrate(now, now + tau, cfg.coherence, cfg.shielding)
                lam_eff = between_pulse_lambda(lam, seq, tau)
                decay_integrated(atoms, lam_eff)
                apply_pulse(atoms, "pi", float(phases[pulse_i % phases.size]), seq.fidelity, rng)
                decay_integrated(atoms, lam_eff)
                survive_exponential(atoms, 2 * tau, lifetime, rng)
                now += 2 * tau
                pulse_i += 1
            probe = atoms.copy()
            apply_pulse(probe, math.pi / 2, math.pi, seq.fidelity, rrng)
            out.append(sample_readout(probe, n_ref, pmf, rrng))
    else:
        for t in times:
            dt = int(t - now)
            if dt:
                decay_integrated(atoms, sched.integrate(now, int(t), cfg.coherence, cfg.shielding))
                survive_exponential(atoms, dt, lifetime, rng)
                now = int(t)
            out.append(sample_readout(atoms, n_ref, pmf, rrng))
    return times, out


def run_coherence_scan(cfg, condition: str, kind: str, seed: int = 0, trials: int | None = None) -> dict:
    trials = cfg.scan.trials if trials is None else trials
    per = [coherence_scan_trial(cfg, condition, kind, seed, k) for k in range(trials)]
    times = per[0][0]
    rows = []
    for i, t in enumerate(times):
        p0 = float(np.mean([p[1][i].p0 for p in per]))
        p1 = float(np.mean([p[1][i].p1 for p in per]))
        pa = float(np.mean([p[1][i].pa for p in per]))
        pmf = float(np.mean([p[1][i].pmf for p in per]))
        c = contrast(ReadoutCounts(p0, p1, pa, pmf))
        rows.append({"t_s": t / 1e6, "contrast": c, "p0": p0, "p1": p1, "pa": pa})
    tt = np.array([r["t_s"] for r in rows])
    y = np.array([r["contrast"] for r in rows])
    if kind == "t1_q1":
        y = -y
    rates = active_rates(CONDITIONS[condition], cfg.coherence, cfg.shielding)
    expected = {"t2": rates.t2, "t1_q1": rates.t1, "t1_q0": rates.t1_q0}[kind]
    good = y > 0
    try:
        fitted = fit_1e_time(tt[good], y[good]) if good.sum() >= 4 else None
    except NonConvergenceError:
        fitted = None
    return {"condition": condition, "kind": kind, "configured_s": expected, "fitted_s": fitted, "rows": rows}


SCAN_PLAN = (
    ("reference", "t2"), ("mot", "t2"), ("prep_unshielded", "t2"), ("prep_shielded", "t2"),
    ("reference", "t1_q1"), ("mot", "t1_q1"), ("prep_unshielded", "t1_q1"), ("prep_shielded", "t1_q1"),
    ("lattice", "t1_q1"),
    ("reference", "t1_q0"), ("prep_unshielded", "t1_q0"), ("prep_shielded", "t1_q0"), ("lattice", "t1_q0"),
)


# ---------------------------------------------------------------------------
# rearrangement benchmark


def run_rearrange_bench(cfg, seed: int = 0, trial: int = 0, outdir=None) -> dict:
    """One fresh-reservoir extraction taken through imaging and rearrangement."""
    with TrialLog(outdir, trial) as log:
        sim = Simulation(cfg, seed, trial, log=log, supply=False)
        n, temp = cfg.transfer.apply()
        res = fresh(cfg.cloud.state(n, temp), cfg.tweezers, cfg.loading)
        counts, _ = sample_extraction(res, cfg.tweezers, cfg.loading, sim.rng("reservoir"))
        rc = cfg.rearrange
        out = prep_cycle(counts, cfg.layout, cfg.prep, sim.rng("prep"), True, rc.move_survival,
                         rc.timing(False), rc.kinematics(cfg.layout.prep_spacing))
        b = out.batch
        plan = b.plan
        row = {"trial": trial, "loaded": b.n_loaded, "detected": b.n_detected, "filled": b.n_atoms,
               "targets": plan.n_targets, "fill": b.n_atoms / plan.n_targets,
               "planned_defects": plan.defects, "displacement": sum(r.displacement for r in plan.rows),
               "plan_time_us": plan.total_time_us, "elapsed_us": out.elapsed_us}
        sim.emit("rearrange", "PLAN", **{k: v for k, v in row.items() if k != "trial"})
        n_events = log.count
    return row | {"events": n_events}


def summarize_rearrange(rows) -> dict:
    fills = np.array([r["fill"] for r in rows])
    return {
        "trials": len(rows),
        "mean_fill": float(fills.mean()),
        "zero_defect_fraction": float(np.mean([r["filled"] == r["targets"] for r in rows])),
        "mean_detected": float(np.mean([r["detected"] for r in rows])),
        "mean_plan_time_us": float(np.mean([r["plan_time_us"] for r in rows])),
        "mean_elapsed_us": float(np.mean([r["elapsed_us"] for r in rows])),
    }


# ---------------------------------------------------------------------------
# acceptance checks


def _within(x, target, rel):
    return x is not None and abs(x - target) <= rel * abs(target)


def check_flux(summary, acc) -> dict:
    m = summary["per_s"]
    return {
        "atoms_per_s": _within(m["atoms"], acc.flux_atoms, acc.flux_rel_tol),
        "qubits_plain_per_s": _within(m["qubits_plain"], acc.flux_qubits_plain, acc.flux_rel_tol),
        "qubits_rearranged_per_s": _within(m["qubits_rearranged"], acc.flux_qubits_rearranged, acc.flux_rel_tol),
    }


def check_depletion(summary, acc) -> dict:
    h = summary["half_fill_extraction"]
    return {
        "half_fill_window": h is not None and acc.depletion_window_lo <= h <= acc.depletion_window_hi,
        "first30_mean": summary["first30_mean_fill"] > acc.depletion_first30_min,
    }


def check_maintenance(summary, cfg) -> dict:
    acc = cfg.acceptance
    out = {"min_population": summary["min_population"] is not None
           and summary["min_population"] >= cfg.maintain.threshold}
    if "fitted_lifetime_s" in summary:
        out["lifetime"] = _within(summary["fitted_lifetime_s"], cfg.storage.lifetime_s, acc.lifetime_rel_tol)
    if "steady_state_closed_form" in summary:
        out["steady_state"] = _within(summary["steady_state_mean"], summary["steady_state_closed_form"],
                                      acc.steady_state_rel_tol)
    if summary["mode"] == "x":
        out["duty"] = acc.duty_lo <= summary["duty_fraction"] <= acc.duty_hi
        out["sawtooth_t2"] = _within(summary["t2_sawtooth_fit"], summary["t2_configured"], acc.coherence_rel_tol)
    return out


CHECKED_SCANS = (("reference", "t2"), ("mot", "t2"), ("prep_shielded", "t2"),
                 ("reference", "t1_q1"), ("prep_shielded", "t1_q1"))


def check_coherence(fits: dict, acc) -> dict:
    out = {}
    for cond, kind in CHECKED_SCANS:
        f = fits.get(f"{cond}:{kind}")
        if f is not None:
            out[f"{cond}:{kind}"] = _within(f["fitted_s"], f["configured_s"], acc.coherence_rel_tol)
    return out


def check_rearrange(summary, acc) -> dict:
    return {
        "mean_fill": abs(summary["mean_fill"] - acc.rearrange_fill) <= acc.rearrange_fill_tol,
        "zero_defect_fraction": acc.zero_defect_lo <= summary["zero_defect_fraction"] <= acc.zero_defect_hi,
    }


# ---------------------------------------------------------------------------
# drop-recapture diagnostic


def run_drop_recapture(cfg, seed: int = 0, samples: int = 20000) -> dict:
    times = list(range(0, 61, 5))
    t_true = cfg.prep.eit_temperature_uK * 1e-6
    surv = drop_recapture(t_true, cfg.trap, times, samples, SeededRng.for_module(seed, 0, "drop").generator())
    t_fit = fit_temperature(times, surv, cfg.trap, samples, SeededRng.for_module(seed, 1, "drop").generator())
    return {"release_us": times, "survival": [float(s) for s in surv], "temperature_uK": t_true * 1e6,
            "fitted_temperature_uK": t_fit * 1e6}


def timeline_rows(cfg, n: int = 8):
    return pipeline_timeline(cfg.timings, n)


__all__ = [
    "replenishment_requirement", "run_flux", "run_depletion", "run_maintenance", "run_coherence_scan",
    "emit", "write_csv", "write_json", "write_timeline_csv", "VERSION_LINE",
]
