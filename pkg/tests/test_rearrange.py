import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from atomreload.core import ZoneLayout
from atomreload.rearrange import (
    ArrayPlan,
    MoveKinematics,
    PlanTiming,
    RowInstance,
    execute_plan,
    plan_array,
    plan_row,
    segment_table,
)


def brute_force(loaded, targets):
    """(defects, displacement) of the best order-preserving matching, by enumeration."""
    m = min(len(loaded), len(targets))
    best = math.inf
    for s in itertools.combinations(loaded, m):
        for t in itertools.combinations(targets, m):
            best = min(best, sum(abs(a - b) for a, b in zip(s, t)))
    return len(targets) - m, (0 if m == 0 else best)


def sorted_subset(draw_list):
    return tuple(sorted(set(draw_list)))


def test_identity_plan():
    p = plan_row(RowInstance((1, 2, 3), (1, 2, 3)))
    assert p.assignment == ((1, 1), (2, 2), (3, 3))
    assert p.displacement == 0 and p.defects == 0


def test_skips_the_far_atom():
    p = plan_row(RowInstance((0, 2, 3, 5), (1, 2, 3)))
    assert p.assignment == ((0, 1), (2, 2), (3, 3))
    assert p.displacement == 1


def test_pigeonhole_defect():
    p = plan_row(RowInstance((0, 1), (0, 1, 2)))
    assert p.defects == 1
    assert len(p.assignment) == 2


def test_unsorted_instance_rejected():
    with pytest.raises(ValueError):
        RowInstance((3, 1), (0,))


def test_row_plan_fits_700_us():
    lay = ZoneLayout()
    kin = MoveKinematics()
    table = segment_table(kin, lay.prep_cols)
    assert table[lay.prep_cols - 1].sum() <= 700
    p = plan_row(RowInstance((0,), (119,)), kin, 700, 120)
    assert p.duration_us == 700


def test_brute_force_agreement_on_random_rows():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        n_cols = int(rng.integers(1, 16))
        ls = tuple(np.flatnonzero(rng.random(n_cols) < rng.random())[:8].tolist())
        ts = tuple(np.flatnonzero(rng.random(n_cols) < rng.random())[:8].tolist())
        p = plan_row(RowInstance(ls, ts))
        assert (p.defects, p.displacement) == brute_force(ls, ts)


cols = st.lists(st.integers(0, 20), max_size=8).map(sorted_subset)


@given(cols, cols)
@settings(max_examples=300)
def test_plan_is_optimal_and_non_crossing(ls, ts):
    p = plan_row(RowInstance(ls, ts))
    assert (p.defects, p.displacement) == brute_force(ls, ts)
    src = [a for a, _ in p.assignment]
    dst = [b for _, b in p.assignment]
    assert src == sorted(src) and dst == sorted(dst)
    assert len(set(src)) == len(src) and len(set(dst)) == len(dst)
    assert set(src) <= set(ls) and set(dst) <= set(ts)


@given(cols, cols, st.integers(0, 20))
@settings(max_examples=300)
def test_extra_atom_never_adds_defects(ls, ts, extra):
    more = tuple(sorted(set(ls) | {extra}))
    assert plan_row(RowInstance(more, ts)).defects <= plan_row(RowInstance(ls, ts)).defects


def test_array_timing_totals_20_ms():
    lay = ZoneLayout()
    plan = plan_array(np.ones((12, 120), dtype=bool), lay, PlanTiming())
    assert sum(r.duration_us for r in plan.rows) == 8_400
    assert plan.total_time_us == 20_000
    assert plan.defects == 0


def test_empty_detections_all_defects():
    lay = ZoneLayout()
    plan = plan_array(np.zeros((12, 120), dtype=bool), lay, PlanTiming())
    assert plan.defects == 540
    assert plan.total_time_us == 20_000
    assert plan.predicted_fill == 0.0


def test_row_defects_follow_hypergeometric_tail():
    # exactly 720 of 1440 sites loaded at random; a row is short when it holds fewer than 45 atoms
    lay = ZoneLayout()
    rng = np.random.default_rng(77)
    short = []
    deficit = []
    for _ in range(3000):
        det = np.zeros(lay.prep_sites, dtype=bool)
        det[rng.choice(lay.prep_sites, 720, replace=False)] = True
        plan = plan_array(det, lay)
        short.extend(r.defects > 0 for r in plan.rows)
        deficit.extend(r.defects for r in plan.rows)
    hg = stats.hypergeom(1440, 720, 120)
    p_short = hg.cdf(44)
    k = np.arange(0, 45)
    mean_deficit = float(np.sum((45 - k) * hg.pmf(k)))
    n = len(short)
    assert abs(np.mean(short) - p_short) < 3 * math.sqrt(p_short * (1 - p_short) / n) + 1e-4
    assert np.mean(deficit) == pytest.approx(mean_deficit, abs=3 * np.std(deficit) / math.sqrt(n) + 1e-4)


def test_perfect_moves_fill_everything(rng):
    lay = ZoneLayout()
    plan = plan_array(np.ones((12, 120), dtype=bool), lay)
    out = execute_plan(plan, 1.0, rng)
    assert out.all()


def test_zero_defect_fraction_binomial():
    lay = ZoneLayout()
    plan = plan_array(np.ones((12, 120), dtype=bool), lay)
    rng = np.random.default_rng(31)
    trials = 4000
    zero = np.mean([execute_plan(plan, 0.996, rng).all() for _ in range(trials)])
    p = 0.996 ** 540
    assert p == pytest.approx(0.115, abs=0.001)
    assert abs(zero - p) < 3 * math.sqrt(p * (1 - p) / trials)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_arrivals_never_exceed_pickups(seed, fill):
    lay = ZoneLayout()
    rng = np.random.default_rng(seed)
    occ = rng.random((12, 120)) < fill
    det = occ ^ (rng.random((12, 120)) < 0.01)
    plan = plan_array(det, lay)
    out = execute_plan(plan, 0.99, rng, occ)
    pickups = sum(len(r.assignment) for r in plan.rows)
    hidden = sum(int(occ[r, plan.targets].sum()) for r in range(12))
    assert out.sum() <= pickups + hidden
    assert out.sum() <= occ.sum()


def test_plan_serializes():
    lay = ZoneLayout()
    plan = plan_array(np.ones((12, 120), dtype=bool), lay)
    d = plan.to_dict()
    assert d["n_targets"] == 540
    assert len(d["rows"]) == 12
    assert isinstance(plan, ArrayPlan)
