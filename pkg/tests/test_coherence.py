import math
from dataclasses import fields, replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomreload.coherence import (
    CONDITIONS,
    CoherenceConfig,
    DDSequence,
    DegenerateEstimateError,
    EnvFlags,
    EnvSchedule,
    ReadoutCounts,
    ShieldingConfig,
    active_rates,
    apply_pulse,
    contrast,
    dd_reload_cycle,
    decay,
    env_gammas,
    expected_readout,
    fit_1e_time,
    mf_leak,
    readout_probability,
)
from atomreload.core import AtomArray, AtomRecord, AtomState

QUIET = CoherenceConfig(**{f.name: 1e12 for f in fields(CoherenceConfig) if f.name not in ("mf_leak_rate", "q0_t1_factor")})


def filled(n, state=AtomState.Q0):
    a = AtomArray(n)
    a.place(np.arange(n), state, 0)
    return a


def test_reference_rates():
    t1, t2 = active_rates(EnvFlags())
    assert t1 == pytest.approx(12.6) and t2 == pytest.approx(1.34)


def test_mot_only():
    assert active_rates(CONDITIONS["mot"]).t2 == pytest.approx(1.15)


def test_shielded_prep():
    t1, t2 = active_rates(CONDITIONS["prep_shielded"])
    assert t2 == pytest.approx(1.09)
    assert t1 == pytest.approx(3.43)


def test_unshielded_prep_and_lattice():
    r = active_rates(CONDITIONS["prep_unshielded"])
    assert (r.t1, r.t2) == (pytest.approx(0.2), pytest.approx(0.05))
    assert active_rates(CONDITIONS["lattice"]).t1 == pytest.approx(4.0)


def test_shielding_suppression_factor():
    assert ShieldingConfig().suppression == pytest.approx((10e9 / 60e6) ** 2)


SOURCES = ("mot_on", "lattice_present", "raman_drive_on")


@pytest.mark.parametrize("env", list(EnvFlags.all_combinations()), ids=str)
def test_rates_add_per_source(env):
    cfg, sh = CoherenceConfig(), ShieldingConfig()
    base = env_gammas(EnvFlags(), cfg, sh)
    total = base.copy()
    for name in SOURCES:
        if getattr(env, name):
            total += env_gammas(EnvFlags(**{name: True}), cfg, sh) - base
    if env.prep_imaging_on:
        total += env_gammas(EnvFlags(prep_imaging_on=True, shielding_on=env.shielding_on), cfg, sh) - base
    assert np.allclose(env_gammas(env, cfg, sh), total, rtol=1e-12)


@pytest.mark.parametrize("env", [e for e in EnvFlags.all_combinations() if e.prep_imaging_on and not e.shielding_on],
                         ids=str)
def test_shielding_never_hurts(env):
    assert active_rates(replace(env, shielding_on=True)).t2 >= active_rates(env).t2


@pytest.mark.parametrize("env", list(EnvFlags.all_combinations()), ids=str)
def test_q0_relaxes_slower(env):
    r = active_rates(env)
    assert r.t1_q0 > r.t1


def test_decay_zero_time_is_identity():
    rec = AtomRecord(bloch=(0.6, 0.0, 0.8))
    assert decay(rec, 0, active_rates(EnvFlags())) == rec


def test_decay_one_t2_gives_1_over_e():
    rates = active_rates(EnvFlags())
    rec = decay(AtomRecord(bloch=(1.0, 0.0, 0.0)), round(rates.t2 * 1e6), rates)
    assert rec.bloch_xy == pytest.approx(math.exp(-1), rel=1e-6)


def test_pi_pulse_flips(rng):
    rec = apply_pulse(AtomRecord(), "pi", 0.0, 1.0, rng)
    assert rec.bloch_z == pytest.approx(-1.0)
    assert rec.internal == AtomState.Q1


def test_pulse_train_contrast_factor():
    rng = np.random.default_rng(6)
    n = 10**5
    atoms = filled(n)
    for k in range(64):
        apply_pulse(atoms, "pi", (k % 2) * math.pi / 2, 0.99995, rng)
    expected = 0.99995 ** 64
    assert expected == pytest.approx(0.9968, abs=1e-4)
    survivors = np.abs(atoms.bloch[:, 2]).mean()
    assert abs(survivors - expected) < 4 * math.sqrt(expected * (1 - expected) / n)


def test_dd_duty_cycle():
    assert DDSequence().duty(80_000) == pytest.approx(0.88)


def test_noiseless_dd_returns_to_zero(rng):
    atoms = filled(20)
    seq = DDSequence(fidelity=1.0)
    dd_reload_cycle(atoms, seq, EnvSchedule.constant(EnvFlags()), -math.pi / 2, rng, QUIET)
    assert np.allclose(atoms.bloch, [0.0, 0.0, 1.0], atol=1e-6)
    assert np.all(atoms.state == AtomState.Q0)


def test_alternate_closing_pulse_maps_to_one(rng):
    atoms = filled(20)
    dd_reload_cycle(atoms, DDSequence(fidelity=1.0), EnvSchedule.constant(EnvFlags()), math.pi / 2, rng, QUIET)
    assert np.allclose(atoms.bloch[:, 2], -1.0, atol=1e-6)
    assert np.all(atoms.state == AtomState.Q1)


def test_mf_leak_rates():
    rng = np.random.default_rng(8)
    atoms = mf_leak(filled(1000), 0.0, rng)
    assert np.all(atoms.state == AtomState.Q0)
    atoms = mf_leak(filled(10**5), 0.075, rng)
    frac = np.count_nonzero(atoms.state == AtomState.MF_LEAKED) / 10**5
    assert abs(frac - 0.075) < 0.003


def test_contrast_values():
    assert contrast(ReadoutCounts(0.9, 0.075, 0.9, 0.075)) == 1.0
    assert contrast(ReadoutCounts(0.4, 0.4, 0.9, 0.075)) == 0.0
    assert contrast(ReadoutCounts(0.90, 0.10, 0.95, 0.075)) == pytest.approx(0.8 / 0.875, rel=1e-15)
    assert contrast(ReadoutCounts(0.90, 0.10, 0.95, 0.075)) == pytest.approx(0.914, abs=5e-4)


def test_readout_probability_values():
    assert readout_probability(ReadoutCounts(0.95, 0.1, 0.95, 0.075)) == 1.0
    assert readout_probability(ReadoutCounts(0.075, 0.1, 0.95, 0.075)) == 0.0
    assert readout_probability(ReadoutCounts(0.5, 0.1, 0.95, 0.075)) == pytest.approx(0.4857, abs=1e-4)


def test_degenerate_denominator():
    with pytest.raises(DegenerateEstimateError):
        contrast(ReadoutCounts(0.1, 0.1, 0.075, 0.075))


fractions = st.fractions(min_value=0, max_value=1, max_denominator=10_000)


@given(fractions, fractions, fractions, fractions)
def test_contrast_is_difference_of_readout_probabilities(p0, p1, pa, pmf):
    if not pa > pmf:
        return
    c = ReadoutCounts(p0, p1, pa, pmf)
    assert contrast(c) == readout_probability(c) - readout_probability(ReadoutCounts(p1, p1, pa, pmf))


@given(st.lists(st.tuples(st.sampled_from(["pi", "pi/2", "decay", "leak"]), st.floats(0, 2 * math.pi),
                          st.floats(0.9, 1.0)), max_size=30), st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_bloch_norm_bounded(ops, seed):
    rng = np.random.default_rng(seed)
    atoms = filled(16)
    rates = active_rates(CONDITIONS["prep_unshielded"])
    for kind, phase, fid in ops:
        if kind == "decay":
            decay(atoms, int(phase * 1e5), rates)
        elif kind == "leak":
            mf_leak(atoms, 0.1, rng)
        else:
            apply_pulse(atoms, kind, phase, fid, rng, jitter=0.01)
        assert np.all(np.linalg.norm(atoms.bloch, axis=1) <= 1 + 1e-12)


def test_schedule_integral_is_additive():
    cfg, sh = CoherenceConfig(), ShieldingConfig()
    sched = EnvSchedule(((20_000, CONDITIONS["prep_shielded"]), (60_000, CONDITIONS["reference"])))
    a, b, c = 5_000, 97_000, 333_333
    assert np.allclose(sched.integrate(a, b, cfg, sh) + sched.integrate(b, c, cfg, sh), sched.integrate(a, c, cfg, sh))
    one = sched.integrate(0, 80_000, cfg, sh)
    manual = (env_gammas(CONDITIONS["prep_shielded"], cfg, sh) * 0.02
              + env_gammas(CONDITIONS["reference"], cfg, sh) * 0.06)
    assert np.allclose(one, manual)


def test_unpolarized_and_leaked_readout_convention():
    atoms = AtomArray(4)
    atoms.place([0], AtomState.UNPOLARIZED, 0)
    atoms.place([1], AtomState.MF_LEAKED, 0)
    c = expected_readout(atoms, 2, 0.5)
    assert (c.p0, c.p1, c.pa) == (0.75, 0.75, 1.0)


def test_fit_exact_series():
    t = np.linspace(0, 3, 12)
    assert fit_1e_time(t, np.exp(-t / 1.34)) == pytest.approx(1.34, abs=1e-6)


def test_fit_constant_series_is_infinite():
    assert fit_1e_time(np.arange(6.0), np.ones(6)) == math.inf


def test_fit_rejects_short_series():
    with pytest.raises(ValueError):
        fit_1e_time([0, 1], [1, 0.5])


def test_monte_carlo_t2_round_trip(cfg):
    from atomreload.metrics import run_coherence_scan
    r = run_coherence_scan(cfg, "prep_shielded", "t2", seed=2, trials=2)
    assert r["fitted_s"] == pytest.approx(1.09, rel=0.05)
