import random

import pytest
from hypothesis import given, settings, strategies as st

from feedopt.assign import assign_layered
from feedopt.dameta import DAParams, Search, analyze, select_index, solve
from feedopt.evalsched import MP, timeline
from feedopt.laygraph import build
from feedopt.model import dumps, objective, solution_to_dict, validate

from conftest import FAST, make_instance


@pytest.fixture(scope="module", params=[(20, 1, "peak", "steps"), (25, 4, "offpeak", [0.12, 0.2])])
def session(request):
    n, seed, prof, e_init = request.param
    inst = make_instance(n, seed, profile=prof, e_init=e_init, fleet=(2, 2))
    g = build(inst)
    asg = assign_layered(g, inst, 0.2, node_limit=2000)
    return inst, g, asg


def check_state(search, s):
    ctx = search.ctx
    assert s.cost == pytest.approx(search.total(s), abs=1e-6)
    served = set()
    for R in s.routes:
        fresh = analyze(ctx, R.k, list(R.seq))
        assert fresh is not None
        tl = timeline(ctx, R.k, R.seq, R.charges)
        assert tl.time_ok and tl.energy_ok
        assert R.cost == pytest.approx(tl.cost(ctx), abs=1e-6)
        for m in R.seq:
            if ctx.kind[m] == MP:
                assert s.where[m] == R.k
                served.add(m)
    assert served == set(s.where)
    assert sorted(s.pool) == sorted(set(search.customers) - served)


@pytest.mark.parametrize("op", Search.OPERATORS)
def test_operator_costs_match_recompute(session, op):
    inst, g, asg = session
    search = Search(inst, g, asg, FAST, random.Random(7))
    s = search.initial_solution()
    check_state(search, s)
    for _ in range(60):
        t = search.apply(op, s)
        if t is not s:
            check_state(search, t)
            if search.no_conflict(t):
                s = t


def test_state_cost_equals_solution_objective(session):
    inst, g, asg = session
    sol, search, state = solve(inst, g, asg, FAST, seed=2)
    assert validate(sol, inst, g) == []
    assert state.cost == pytest.approx(objective(sol, inst, g), abs=1e-6)
    assert sol.objective == pytest.approx(state.cost, abs=1e-6)


def test_vehicle_exchange_keeps_consistency(session):
    inst, g, asg = session
    search = Search(inst, g, asg, FAST, random.Random(1))
    s = search.initial_solution()
    t = search.vehicle_exchange(s)
    check_state(search, t)
    assert t.cost <= s.cost + 1e-9


def test_run_never_worse_than_initial(session):
    inst, g, asg = session
    search = Search(inst, g, asg, FAST, random.Random(5))
    init = search.initial_solution()
    best = search.run(init)
    assert best.cost <= init.cost + 1e-9
    assert search.no_conflict(best)


def test_determinism(session):
    inst, g, asg = session
    a = solve(inst, g, asg, FAST, seed=11)[0]
    b = solve(inst, g, asg, FAST, seed=11)[0]
    assert dumps(solution_to_dict(a)) == dumps(solution_to_dict(b))


def test_progress_reports_every_hundred(session):
    inst, g, asg = session
    seen = []
    solve(inst, g, asg, DAParams(iter_max=400, n_stagnant=50), seed=0, progress=seen.append)
    assert [d["iter"] for d in seen] == [100, 200, 300, 400][:len(seen)]
    assert all(set(d) == {"iter", "best", "threshold", "unserved"} for d in seen)


def test_zero_iterations_returns_initial(session):
    inst, g, asg = session
    sol, search, state = solve(inst, g, asg, DAParams(iter_max=0), seed=0)
    assert validate(sol, inst, g) == []


def test_empty_instance():
    inst = make_instance(0, 0)
    g = build(inst)
    asg = assign_layered(g, inst)
    sol, _, _ = solve(inst, g, asg, FAST)
    assert sol.objective == 0.0
    assert validate(sol, inst, g) == []


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1, exclude_max=True), st.floats(0.5, 10), st.integers(1, 50))
def test_select_index_in_range(y, p, n):
    i = select_index(y, p, n)
    assert 1 <= i <= n


def test_select_index_greediness():
    # a larger exponent pushes picks toward the head of the list
    rnd = random.Random(0)
    ys = [rnd.random() for _ in range(2000)]
    low = sum(select_index(y, 6.0, 20) for y in ys)
    high = sum(select_index(y, 1.0, 20) for y in ys)
    assert low < high


@pytest.mark.parametrize("kw", [dict(t_max=0), dict(n_stagnant=0), dict(iter_max=-1), dict(index_mode="x")])
def test_params_validated(kw):
    with pytest.raises(ValueError):
        DAParams(**kw)
