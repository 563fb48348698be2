import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipsharp import explore as ex
from ipsharp import oracle
from ipsharp.experiments import simulate_grid
from ipsharp.graphical import empty_timeline, from_records, sample_timeline
from ipsharp.lattice import Box
from ipsharp.rates import constants, contact, random_monotone_spec

seeds = st.integers(0, 2**31 - 1)


def test_empty_timeline_reveals_everything():
    spec = contact(0.7)
    box = Box(1, 1)
    rec, f = ex.explore_once(empty_timeline(box, 2.0, constants(spec).M), 0.5, spec, 0.3)
    assert f == 1 and rec.phase1_outcome == 1 and rec.phase2
    assert sorted(rec.strips(1)) == [(x, 0.5, 2.0) for x in range(box.n)]
    assert sorted(rec.strips(2)) == [(x, 0.0, 2.0) for x in range(box.n)]
    assert rec.revealed_atoms == 0
    assert rec.revealed_length == pytest.approx(2.0 * box.n)
    assert rec.contains(0, 0.1) and not rec.contains(0, 0.0)


def test_start_at_horizon():
    spec = contact(0.7)
    box = Box(1, 1)
    rec, f = ex.explore_once(empty_timeline(box, 1.0, constants(spec).M), 1.0, spec, 0.3)
    assert f == 1 and rec.strips(1) == []


def test_early_kill_stops_after_phase_one():
    spec = contact(0.7)
    box = Box(0, 1)
    tl = from_records(box, 1.0, constants(spec).M, [0], [0.5], [1.0], [0.1])
    rec, f = ex.explore_once(tl, 0.2, spec, 0.3)
    assert f == 0 and rec.phase1_outcome == 0 and not rec.phase2
    assert rec.strips() == [(0, 0.2, 0.5)]
    assert rec.revealed_atoms == 1


@pytest.mark.parametrize("S", [-0.1, 1.5])
def test_start_time_out_of_range(S):
    spec = contact(0.7)
    with pytest.raises(ValueError):
        ex.explore_once(empty_timeline(Box(1, 1), 1.0, constants(spec).M), S, spec, 0.0)


def test_determinism_degenerate_timelines():
    spec = contact(0.7)
    M = constants(spec).M
    box = Box(2, 1)
    assert ex.check_determinism(empty_timeline(box, 1.0, M), 0.3, spec, 0.5)
    tl = sample_timeline(box, 1.0, M, 4)
    assert ex.check_determinism(tl, 0.3, spec, 1.0)


@given(seeds)
def test_determinism_and_domination(seed):
    gen = np.random.default_rng(seed)
    spec = random_monotone_spec(gen)
    T = 2.0
    tl = sample_timeline(Box(2, 1), T, constants(spec).M, gen)
    S, h = float(gen.random() * T), float(gen.random())
    assert ex.check_determinism(tl, S, spec, h)
    assert ex.phase1_domination(tl, S, spec, h)


def test_determinism_trials():
    out = ex.determinism_trials(contact(1.0), 2, 2.0, 0.2, 2000, seed=1)
    assert out == {"trials": 2000, "mismatches": 0, "domination_violations": 0}


def _union_count(tl, rec):
    n = 0
    for i in range(tl.box.n):
        times = tl.site_atoms(i)[0]
        n += sum(1 for t in times if rec.contains(i, t))
    return n


@given(seeds)
def test_strips_inside_box_and_atom_count(seed):
    gen = np.random.default_rng(seed)
    spec = random_monotone_spec(gen)
    T = 1.5
    tl = sample_timeline(Box(2, 1), T, constants(spec).M, gen)
    rec, _ = ex.explore_once(tl, float(gen.random() * T), spec, float(gen.random()))
    for x, lo, hi in rec.strips():
        assert 0 <= x < tl.box.n and 0.0 <= lo < hi <= T
    for x, lo, hi in rec.strips(1):
        assert lo >= rec.S
    assert rec.revealed_atoms == _union_count(tl, rec)
    assert rec.revealed_length <= tl.box.n * T + 1e-12


def test_revelation_probability_basic():
    spec = contact(0.7)
    est = ex.revelation_probability((0,), 0.5, spec, 0.2, 1.0, 1, 2000, seed=0)
    assert 0.0 <= est.mean <= 1.0
    with pytest.raises(ValueError):
        ex.revelation_probability((0,), 0.0, spec, 0.2, 1.0, 1, 10)


def test_revelation_grid_below_bound():
    spec = contact(1.0)
    m, T, h, reps = 1, 2.0, 0.2, 4000
    sigma = simulate_grid(spec, 2 * m, [h], [T], reps, seed=2).sigma(0, 0)
    bound = ex.revelation_bound(spec, T, sigma.mean)
    rows = ex.revelation_grid(spec, h, T, m, [(-1,), (0,), (1,)], [0.5, 1.0, 2.0], reps, seed=3)
    assert len(rows) == 9 and set(rows[0]) == set(ex.REVELATION_COLUMNS)
    for r in rows:
        slack = 3 * math.hypot(r["stderr"], (spec.n_local + 1) * sigma.stderr / T)
        assert r["p_hat"] <= bound + slack


def test_z_measure_below_bound():
    spec = contact(0.7)
    m, T, h = 1, 1.5, 0.3
    b = ex.run_explorations(spec, m, T, h, 4000, seed=4)
    z = constants(spec).M * b.zlen
    sigma = oracle.exact_sigma(spec, 2 * m, h, T)
    assert z.mean() <= ex.z_measure_bound(spec, m, sigma) + 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_osss_at_h_one_matches_analytic_variance():
    spec = contact(0.7)
    M, T = constants(spec).M, 0.5
    res = ex.osss_rhs(spec, 1.0, T, 1, n_t=8, reps=4000, influence_reps=500, seed=5)
    q = math.exp(-M * T)
    assert abs(res.variance.mean - q * (1 - q)) <= 3 * res.variance.stderr + 1e-3
    assert res.holds()


def test_osss_inequality_contact():
    res = ex.osss_rhs(contact(0.7), 0.3, 2.0, 2, n_t=12, reps=3000, influence_reps=400, seed=6)
    assert res.holds()
    assert res.rhs.stderr > 0 and res.z_measure.mean > 0
    assert set(res.to_dict()) >= {"rhs", "variance", "theta", "holds_3sigma"}


def test_osss_refinement_stable():
    spec = contact(0.7)
    a = ex.osss_rhs(spec, 0.3, 1.0, 1, n_t=16, reps=3000, influence_reps=1500, seed=7)
    b = ex.osss_rhs(spec, 0.3, 1.0, 1, n_t=32, reps=3000, influence_reps=1500, seed=7)
    assert abs(a.rhs.mean - b.rhs.mean) <= 0.05 * a.rhs.mean + 3 * math.hypot(a.rhs.stderr, b.rhs.stderr)


def test_time_nodes_weights():
    t, w = ex.time_nodes(2.0, 4)
    assert w.sum() == pytest.approx(2.0)
    assert 0 < t[0] < 1e-6 and t[-1] == 2.0
