import math

import pytest
from hypothesis import given, settings, strategies as st

from feedopt.gen import (ScenarioSpec, StationSpec, generate, max_nearest_mp_distance, meeting_points,
                         sunflower, timetable)
from feedopt.laygraph import build
from feedopt.model import reachable_mps


def test_default_grid_has_26_departures():
    spec = ScenarioSpec(customers=5)
    assert sum(len(timetable(s)) for s in spec.stations) == 26
    rep = {}
    generate(spec, rep)
    assert rep["layers"] == 26


def test_timetable_every_20_minutes():
    assert timetable(StationSpec((0.0, 0.0), 30.0, 90.0)) == (30.0, 50.0, 70.0, 90.0)


def test_sunflower_count_and_annulus():
    pts = sunflower(111, 1.5, 6.0)
    assert len(pts) == 111
    assert len(set(pts)) == 111
    for x, y in pts:
        assert 1.5 - 1e-9 <= math.hypot(x, y) <= 6.0 + 1e-9


def test_ring_scenario_uses_exact_mp_count():
    inst = generate(ScenarioSpec(customers=20, geometry="ring", mp_count=111, max_walk=1.0))
    assert len(inst.meeting_points) == 111


def test_lattice_reachable_count_bound():
    # brute force over origins inside one cell of the unit lattice
    mps = meeting_points(ScenarioSpec(customers=0))
    best = 0
    steps = 40
    for a in range(steps + 1):
        for b in range(steps + 1):
            o = (2.0 + a / steps, 2.0 + b / steps)
            best = max(best, len(reachable_mps(o, mps, 1.5, 0.085)))
    assert best == 9


def test_requests_reach_within_walk_limit():
    inst = generate(ScenarioSpec(customers=60, seed=3))
    for r in inst.requests:
        for j, d, t in r.reachable:
            assert d <= inst.max_walk + 1e-12
            assert t == pytest.approx(d / inst.walk_speed)
            assert math.dist(r.origin, inst.meeting_points[j]) == pytest.approx(d)


def test_peak_profile_concentrates_demand():
    peak = generate(ScenarioSpec(customers=200, seed=1, profile="peak"))
    off = generate(ScenarioSpec(customers=200, seed=1, profile="offpeak"))
    assert len(build(peak).active) < len(build(off).active)


def test_e_init_steps_cycle():
    inst = generate(ScenarioSpec(customers=1, fleet=(4, 4)))
    fr = [v.e_init / v.battery for v in inst.vehicles]
    assert fr[:7] == pytest.approx([0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])


def test_spec_round_trip():
    spec = ScenarioSpec(customers=7, seed=9, fleet=(1, 3), e_init=[0.3, 0.6])
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("kw", [dict(mp_spacing=0), dict(geometry="hex"), dict(profile="noon"),
                                dict(geometry="ring", inner_radius=6.0, outer_radius=5.0),
                                dict(max_group=0)])
def test_spec_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        ScenarioSpec(**kw)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 30))
def test_generation_is_reproducible(seed, n):
    a = generate(ScenarioSpec(customers=n, seed=seed))
    b = generate(ScenarioSpec(customers=n, seed=seed))
    assert a == b


def test_nearest_mp_distance_bounded_on_lattice():
    inst = generate(ScenarioSpec(customers=100, seed=2))
    assert max_nearest_mp_distance(inst) <= math.sqrt(0.5) + 1e-9
