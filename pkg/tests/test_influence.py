import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipsharp import influence as inf
from ipsharp.graphical import BoxState, SiteField, empty_timeline, evolve, from_records, make_rng, sample_timeline
from ipsharp.lattice import Box
from ipsharp.pivotal import PivotalQuery, is_pivotal
from ipsharp.rates import constants, contact, random_monotone_spec

seeds = st.integers(0, 2**31 - 1)


def reference_cone(tl, T, R):
    """Forward-in-reverse sweep over all atoms: the set grows at atoms of its own sites."""
    box = tl.box
    rec = tl.records()[::-1]
    entry = {box.origin: T}
    for r in rec:
        s, i = float(r["time"]), int(r["site"])
        if s > T or i not in entry:
            continue
        for j in box.neighbor_table(R)[i]:
            if j >= 0 and j not in entry:
                entry[j] = s
    return entry


def test_empty_timeline_cone_is_target():
    box = Box(2, 1)
    cone, _ = inf.backward_cone(empty_timeline(box, 1.0, 2.4), R=1, lazy=False)
    assert cone.sites == [(0,)]
    assert cone.contains((0,), 0.0) and not cone.contains((1,), 0.0)
    assert cone.sets() == [(1.0, frozenset({(0,)}))]


def test_single_atom_at_target():
    box = Box(2, 1)
    tl = from_records(box, 1.0, 2.4, [box.origin], [0.4], [1.0], [0.5])
    cone, _ = inf.backward_cone(tl, R=1, lazy=False)
    assert not cone.contains((1,), 0.41) and cone.contains((1,), 0.4) and cone.contains((-1,), 0.0)
    assert cone.contains((0,), 1.0) and not cone.contains((2,), 0.0)
    assert [t for t, _ in cone.sets()] == [1.0, 0.4]


def test_atom_outside_cone_ignored():
    box = Box(3, 1)
    tl = from_records(box, 1.0, 2.4, [box.index((2,))], [0.6], [1.0], [0.5])
    cone, _ = inf.backward_cone(tl, R=1, lazy=False)
    assert cone.sites == [(0,)]


def test_nesting_and_join_times():
    box = Box(3, 1)
    tl = from_records(box, 2.0, 2.4, [box.origin, box.index((1,))], [1.5, 0.7], [1.0, 1.0], [0.5, 0.5])
    cone, _ = inf.backward_cone(tl, R=1, lazy=False)
    assert cone.contains((2,), 0.7) and not cone.contains((2,), 0.71)
    sets = [s for _, s in cone.sets()]
    assert all(a <= b for a, b in zip(sets, sets[1:]))
    assert inf.cone_contains(cone, (0,), 2.0)


@given(seeds)
def test_kernel_matches_reference(seed):
    spec = contact(1.0)
    tl = sample_timeline(Box(12, 1), 1.0, constants(spec).M, seed)
    cone, _ = inf.backward_cone(tl, R=1, clip=True)
    ref = reference_cone(tl, 1.0, 1)
    got = {int(i): float(cone.entry[i]) for i in np.nonzero(cone.entry >= 0)[0]}
    assert got == ref


@given(seeds)
def test_cone_ignores_marks(seed):
    tl = sample_timeline(Box(10, 1), 1.5, 3.0, seed)
    a, _ = inf.backward_cone(tl, R=1, clip=True)
    b, _ = inf.backward_cone(tl.scramble_marks(make_rng(seed, 1)), R=1, clip=True)
    assert np.array_equal(a.entry, b.entry)


def test_lazy_extension_and_escape_error():
    tl = sample_timeline(Box(1, 1), 3.0, 3.0, 2)
    with pytest.raises(inf.ConeEscapeError):
        inf.backward_cone(tl, R=1, lazy=False)
    cone, big = inf.backward_cone(tl, R=1, lazy=True)
    assert not cone.clipped and big.box.m > 1
    assert np.array_equal(big.restrict(Box(1, 1)).times, tl.times)
    reach = cone.box.sup_norm()[cone.entry >= 0].max()
    assert reach < cone.box.m


def test_site_field_cone_stable_under_box_choice():
    field = SiteField(4, 2.0, 3.0, 1)
    a, _ = inf.backward_cone(field, R=1)
    tl = field.box_timeline(Box(40, 1))
    b, _ = inf.backward_cone(tl, R=1, lazy=False)
    assert sorted(a.sites) == sorted(b.sites)


@given(seeds)
def test_pivotal_points_lie_in_cone(seed):
    gen = np.random.default_rng(seed)
    spec = random_monotone_spec(gen)
    M = constants(spec).M
    box = Box(3, 1)
    T, h = 1.5, float(gen.random())
    tl = sample_timeline(box, T, M, gen)
    cone, _ = inf.backward_cone(tl, R=1, clip=True)
    for _ in range(20):
        x = int(gen.integers(box.n))
        q = PivotalQuery(box.coord(x), float(T * (1 - gen.random())), float(gen.random() * M), T, 3, h)
        if is_pivotal(tl, q, spec):
            assert cone.contains(q.x, 0.0) and cone.contains(q.x, q.t)


@given(seeds)
def test_cone_restricted_evolution(seed):
    gen = np.random.default_rng(seed)
    spec = random_monotone_spec(gen)
    tl = sample_timeline(Box(4, 1), 2.0, constants(spec).M, gen)
    cone, _ = inf.backward_cone(tl, R=1, clip=True)
    h = float(gen.random())
    full = evolve(BoxState.ones(tl.box), tl, spec, h).final[tl.box.origin]
    assert inf.evolve_in_cone(tl, cone, spec, h) == full


def test_brw_time_zero_and_growth():
    pop = inf.brw_simulate(2.0, 1, 1, 0.0, 0)
    assert pop.size == 1 and np.array_equal(pop.positions, [[0]])
    with pytest.raises(ValueError):
        inf.brw_simulate(2.0, 1, 1, -1.0, 0)


def test_brw_mean_small():
    est, expected = inf.brw_mean_check(1.0, 1, 1, 0.5, 4000, seed=1)
    assert expected == pytest.approx(math.e)
    assert est.within(expected)


def test_brw_positions_spread_by_radius():
    pop = inf.brw_simulate(1.0, 1, 2, 1.0, 3)
    assert pop.positions.shape[1] == 2


def test_brw_cap():
    with pytest.raises(inf.BrwCapError):
        inf.brw_simulate(5.0, 1, 1, 3.0, 0, cap=100)


@given(seeds)
def test_coupled_brw_dominates_cone(seed):
    M = 3.0
    tl = sample_timeline(Box(4, 1), 1.0, M, seed)
    cone, _ = inf.backward_cone(tl, R=1, lazy=True, rng=make_rng(seed, 5))
    cc = inf.coupled_brw(cone, M, make_rng(seed, 6))
    assert np.all(cc.cone_sizes <= cc.population)
    assert cc.cone_sizes[0] == 1


def test_coupled_brw_mean_is_branching_mean():
    M, T, reps = 2.0, 0.6, 3000
    pops = []
    for r in range(reps):
        field = SiteField(11, T, M, 1, stream=r)
        cone, _ = inf.backward_cone(field, R=1)
        pops.append(inf.coupled_brw(cone, M, make_rng(11, r)).population[-1])
    pops = np.array(pops, dtype=float)
    mean = math.exp(M * 2 * T)
    assert abs(pops.mean() - mean) <= 3 * pops.std(ddof=1) / math.sqrt(reps)


def test_tail_profile_basic():
    prof = inf.cone_tail_profile(contact(1.0), 1.0, 0.0, 300, seed=2)
    assert prof.rows[0]["distance"] == 0 and prof.rows[0]["p_hat"] == 1.0
    assert prof.rows[-1]["hits"] == 0
    assert set(prof.rows[0]) == set(inf.TailProfile.COLUMNS)


@given(seeds)
def test_cone_reach_bounded_by_growth_steps(seed):
    tl = sample_timeline(Box(3, 1), 1.0, 2.4, seed)
    cone, _ = inf.backward_cone(tl, R=1, lazy=True)
    assert cone.max_distance() <= 1 * cone.step_times.size


def test_tail_profile_decays():
    prof = inf.cone_tail_profile(contact(1.0), 3.0, 0.0, 10_000, seed=0)
    assert prof.slope < 0
    assert prof.monotone_within_ci()
