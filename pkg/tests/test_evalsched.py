import random

import pytest
from hypothesis import given, settings, strategies as st

from feedopt.assign import assign_layered
from feedopt.dameta import solve
from feedopt.evalsched import (Charge, OccupancyGrid, conflict_check, exact_overlap, forward_slack,
                               propagate, schedule_charging, timeline, travel_if_feasible)
from feedopt.laygraph import build
from feedopt.model import validate

from conftest import FAST, make_instance


@pytest.fixture(scope="module")
def low_battery():
    inst = make_instance(30, 1, profile="offpeak", e_init=[0.12, 0.15])
    g = build(inst)
    asg = assign_layered(g, inst, 0.2, node_limit=2000)
    sol, search, state = solve(inst, g, asg, FAST)
    return inst, g, sol, search, state


def ledger(ctx, k, tl):
    """Terminal energy rebuilt from kilometres and charged minutes."""
    km = 0.0
    loc_prev = 0
    for n in tl.nodes[1:]:
        here = ctx.ch_loc[-n - 1] if n < 0 else ctx.loc[n]
        km += ctx.dm[loc_prev][here]
        loc_prev = here
    charged = sum(ctx.ch_rate[-n - 1] * t for n, t in zip(tl.nodes, tl.tau) if n < 0)
    return ctx.e_init[k] - ctx.beta[k] * km + charged


def test_low_battery_fleet_charges_and_validates(low_battery):
    inst, g, sol, search, state = low_battery
    assert validate(sol, inst, g) == []
    assert any(R.charges for R in state.routes)


def test_energy_ledger_and_bounds(low_battery):
    inst, g, sol, search, state = low_battery
    ctx = search.ctx
    for R in state.routes:
        tl = timeline(ctx, R.k, R.seq, R.charges)
        assert tl.time_ok and tl.energy_ok
        assert tl.E[-1] == pytest.approx(ledger(ctx, R.k, tl), abs=1e-6)
        for e in tl.E:
            assert ctx.e_min[R.k] - 1e-6 <= e <= ctx.e_max[R.k] + 1e-6


def test_without_charges_energy_runs_low(low_battery):
    _, _, _, search, state = low_battery
    ctx = search.ctx
    charged = [R for R in state.routes if R.charges]
    assert any(not timeline(ctx, R.k, R.seq, ()).energy_ok for R in charged)


def test_schedule_charging_repairs_routes(low_battery):
    _, _, _, search, state = low_battery
    ctx = search.ctx
    for R in state.routes:
        if not R.charges:
            continue
        for greedy in (True, False):
            plan = schedule_charging(ctx, R.k, R.seq, random.Random(3), greedy=greedy)
            assert plan.success
            tl = timeline(ctx, R.k, R.seq, plan.charges)
            assert tl.time_ok and tl.energy_ok


def test_travel_matches_timeline(low_battery):
    _, _, _, search, state = low_battery
    ctx = search.ctx
    for R in state.routes:
        fast = travel_if_feasible(ctx, R.k, R.seq)
        tl = timeline(ctx, R.k, R.seq, ())
        assert fast is not None
        assert fast == pytest.approx(tl.travel, abs=1e-9)


def test_malformed_sequence(low_battery):
    _, g, _, search, state = low_battery
    ctx = search.ctx
    R = next(R for R in state.routes if len(R.seq) > 3)
    assert timeline(ctx, R.k, R.seq[:-1], ()) is None
    assert travel_if_feasible(ctx, R.k, list(reversed(R.seq))) is None


def test_charge_at_loaded_position_rejected(low_battery):
    _, _, _, search, state = low_battery
    ctx = search.ctx
    R = next(R for R in state.routes if len(R.seq) > 3)
    tl = timeline(ctx, R.k, R.seq, [Charge(0, 0, 0.0, 1.0)])
    assert not tl.time_ok


def test_forward_slack_bounded(low_battery):
    _, _, _, search, state = low_battery
    ctx = search.ctx
    for R in state.routes:
        rs = propagate(R.seq, R.k, ctx, R.charges)
        for i in range(len(rs.timeline.nodes)):
            s = forward_slack(rs, i)
            assert 0.0 <= s <= ctx.T
            assert s <= rs.wait_down[i] + 1e-12


def test_forward_slack_delay_is_safe(low_battery):
    # delaying every departure after the depot by the depot slack keeps all windows
    _, g, _, search, state = low_battery
    ctx = search.ctx
    for R in state.routes:
        if not R.seq:
            continue
        rs = propagate(R.seq, R.k, ctx, ())
        tl = rs.timeline
        s = min(rs.F[0], ctx.T)
        if s == float("inf"):
            continue
        t = s
        for i in range(1, len(tl.nodes)):
            t = max(0.0, t - tl.W[i])
            n = tl.nodes[i]
            if n >= 0:
                assert tl.B[i] + t <= ctx.l[n] + 1e-6


# ---------------------------------------------------------------- occupancy grid

def aligned_events(draw_n, rnd, horizon=120.0):
    out = []
    for _ in range(draw_n):
        o = rnd.randrange(3)
        s = rnd.randrange(0, int(horizon * 6) - 1) / 6.0
        d = rnd.randrange(1, 60) / 6.0
        out.append((o, s, min(horizon, s + d)))
    return out


@settings(max_examples=300, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 8))
def test_grid_matches_exact_when_aligned(rnd, n):
    evs = aligned_events(n, rnd)
    assert conflict_check(evs, n_chargers=3, horizon=120.0) == (not exact_overlap(evs))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.floats(0, 100), st.floats(0.01, 15)), min_size=1, max_size=8))
def test_grid_never_falsely_permissive(raw):
    evs = [(o, s, min(120.0, s + d)) for o, s, d in raw]
    if exact_overlap(evs):
        assert not conflict_check(evs, n_chargers=3, horizon=120.0)


def test_first_free_and_free_run():
    g = OccupancyGrid(1, 60.0)
    assert g.occupy(0, 10.0, 20.0)
    assert not g.occupy(0, 15.0, 16.0)
    assert g.first_free(0, 5.0, 40.0, 10.0) == pytest.approx(20.0)
    assert g.first_free(0, 0.0, 40.0, 10.0) == pytest.approx(0.0)
    assert g.first_free(0, 5.0, 9.0, 10.0) is None
    assert g.free_run(0, 2.0, 30.0) == pytest.approx(8.0)
    assert g.free_run(0, 12.0, 30.0) == 0.0
    g.release(0, 10.0, 20.0)
    assert g.is_free(0, 0.0, 60.0)


def test_back_to_back_events_do_not_conflict():
    assert conflict_check([(0, 0.0, 10.0), (0, 10.0, 20.0)], n_chargers=1, horizon=30.0)
    assert not conflict_check([(0, 0.0, 10.0), (0, 9.9, 20.0)], n_chargers=1, horizon=30.0)
    assert conflict_check([(0, 0.0, 10.0), (1, 5.0, 20.0)], n_chargers=2, horizon=30.0)


def test_event_count_limit():
    evs = [(0, 0.0, 1.0), (0, 2.0, 3.0), (0, 4.0, 5.0)]
    assert conflict_check(evs, n_chargers=1, horizon=10.0, max_events=3)
    assert not conflict_check(evs, n_chargers=1, horizon=10.0, max_events=2)


def test_event_outside_horizon_raises():
    from feedopt.model import StructuralError
    g = OccupancyGrid(1, 10.0)
    with pytest.raises(StructuralError):
        g.occupy(0, 5.0, 12.0)
