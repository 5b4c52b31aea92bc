import io
import itertools
import math

import pytest

from feedopt.evalsched import Ctx, timeline
from feedopt.laygraph import build
from feedopt.milpio import (CONST, EnergyBindingError, LPFormatError, build_full, build_second_stage,
                            check_solution, dumps_lp, export_full, read_lp, read_values, solution_values,
                            solve_exact, write_values)
from feedopt.model import RoutePlan, Solution, validate, walk_time_to

from conftest import make_instance


def close(a, b):
    return math.isclose(a, b, rel_tol=1e-11, abs_tol=1e-12)


def tiny(seed, customers=3):
    return make_instance(customers, seed, fleet=(1, 1), e_init=[0.8, 0.8], max_walk=1.0,
                         mp_spacing=1.2, profile="offpeak")


def empty_solution(inst, g):
    routes = [RoutePlan(k, [g.depot_start, g.depot_end], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0],
                        [v.e_init, v.e_init], [0.0, 0.0]) for k, v in enumerate(inst.vehicles)]
    return Solution(routes, [None] * len(inst.requests), inst.weights.omega * len(inst.requests))


def brute_optimum(inst, g):
    """Every request -> (meeting point, vehicle) or rejected; every visiting order per vehicle."""
    w = inst.weights
    K = len(inst.vehicles)
    choices = []
    for r in range(len(inst.requests)):
        opts = [None] + [(i, k) for rr, i, _ in g.walk_arcs if rr == r for k in range(K)]
        choices.append(opts)
    best = float("inf")
    for pick in itertools.product(*choices):
        cost = w.omega * sum(1 for p in pick if p is None)
        for r, p in enumerate(pick):
            if p is not None:
                cost += w.lambda2 * walk_time_to(inst, g, r, p[0])
        if cost >= best:
            continue
        for k in range(K):
            groups = {}
            for r, p in enumerate(pick):
                if p is not None and p[1] == k:
                    groups.setdefault(p[0], []).append(r)
            if not groups:
                continue
            ctx = Ctx(inst, g, groups)
            layers = sorted({g.layer_of_node[m] for m in groups})
            per = [[m for m in groups if g.layer_of_node[m] == li] for li in layers]
            route_best = None
            for combo in itertools.product(*[itertools.permutations(p) for p in per]):
                seq = []
                for li, perm in zip(layers, combo):
                    seq += list(perm) + [g.station_node_of_layer[li]]
                tl = timeline(ctx, k, seq, ())
                if tl is None or not tl.time_ok:
                    continue
                assert tl.energy_ok
                c = w.lambda1 * tl.travel + w.lambda3 * tl.wait
                route_best = c if route_best is None else min(route_best, c)
            if route_best is None:
                cost = float("inf")
                break
            cost += route_best
        best = min(best, cost)
    return best


@pytest.mark.parametrize("seed", range(10))
def test_exact_oracle_matches_brute_force(seed):
    inst = tiny(seed)
    g = build(inst)
    res = solve_exact(inst, g)
    assert res.proven
    assert res.check.ok
    assert res.value == pytest.approx(brute_optimum(inst, g), abs=1e-6)
    assert validate(res.solution, inst, g) == []
    assert res.solution.objective == pytest.approx(res.value, abs=1e-6)


def test_exact_oracle_refuses_energy_binding_cases():
    inst = make_instance(3, 1, fleet=(1, 0), e_init=[0.11, 0.11], max_walk=1.0, mp_spacing=1.2,
                         profile="offpeak")
    g = build(inst)
    with pytest.raises(EnergyBindingError):
        solve_exact(inst, g)


def test_single_rejected_customer_costs_omega():
    inst = tiny(0, customers=1)
    g = build(inst)
    m = build_full(inst, g)
    vals = solution_values(empty_solution(inst, g), inst, g, m)
    rep = check_solution(m, vals)
    assert rep.ok, rep.violations[:3]
    assert rep.objective == pytest.approx(inst.weights.omega)


def test_all_zero_assignment_violates_depot_departure():
    inst = tiny(0)
    g = build(inst)
    m = build_full(inst, g)
    rep = check_solution(m, {CONST: 1.0})
    fams = {v["constraint"].split("_", 1)[0] for v in rep.violations}
    assert "depotout" in fams


def test_metaheuristic_solution_checks(small_case):
    inst, g, sol = small_case
    m = build_full(inst, g)
    rep = check_solution(m, solution_values(sol, inst, g, m))
    assert rep.ok, rep.violations[:3]
    assert rep.objective == pytest.approx(sol.objective, abs=1e-6)


def test_perturbed_solution_is_caught(small_case):
    inst, g, sol = small_case
    m = build_full(inst, g)
    vals = solution_values(sol, inst, g, m)
    rp = next(r for r in sol.routes if r.used())
    key = f"B_{rp.nodes[1]}_{rp.vehicle}"
    vals[key] = g.l[rp.nodes[1]] + 10.0
    assert not check_solution(m, vals).ok


def test_second_stage_objective_drops_walking(small_case):
    inst, g, sol = small_case
    assert all(r.passengers == 1 for r in inst.requests)
    assert all(m is not None for m in sol.mp_of_request)
    m = build_second_stage(inst, g, sol.mp_of_request)
    rep = check_solution(m, solution_values(sol, inst, g, m))
    assert rep.ok, rep.violations[:3]
    walk = sum(walk_time_to(inst, g, r, n) for r, n in enumerate(sol.mp_of_request)
               if sol.served_requests()[r] is not None)
    assert rep.objective == pytest.approx(sol.objective - inst.weights.lambda2 * walk, abs=1e-6)


def test_second_stage_keeps_only_assigned_nodes(small_case):
    inst, g, sol = small_case
    m = build_second_stage(inst, g, sol.mp_of_request)
    assigned = {n for n in sol.mp_of_request if n is not None}
    for name in m.variables:
        if name.startswith("x_"):
            _, i, j, _ = name.split("_")
            for n in (int(i), int(j)):
                if g.kind[n] == "mp":
                    assert n in assigned


def test_lp_round_trip(small_case, tmp_path):
    inst, g, _ = small_case
    path = tmp_path / "full.lp"
    m = export_full(inst, g, str(path))
    back = read_lp(str(path))
    assert set(back.variables) == set(m.variables)
    for v, (kind, lb, ub) in m.variables.items():
        k2, lb2, ub2 = back.variables[v]
        assert k2 == kind and close(lb, lb2) and close(ub, ub2)
    assert len(back.constraints) == len(m.constraints)
    for (n1, r1, s1, b1), (n2, r2, s2, b2) in zip(m.constraints, back.constraints):
        assert n1 == n2 and s1 == s2 and close(b1, b2)
        assert r1.keys() == r2.keys()
        assert all(close(r1[v], r2[v]) for v in r1)
    assert back.objective.keys() == m.objective.keys()
    assert all(close(c, back.objective[v]) for v, c in m.objective.items())


def test_lp_reader_reports_line_numbers():
    text = "Minimize\n obj: + 1 x\nSubject To\n c1: + 1 x >= 1\n c2: + 2 x >= foo\nEnd\n"
    with pytest.raises(LPFormatError) as err:
        read_lp(io.StringIO(text))
    assert err.value.line == 5


def test_lp_reader_accepts_hand_written_file():
    text = ("\\ comment\nMinimize\n obj: 3 x + 2 y\nSubject To\n c1: x + y >= 1\n c2: x - y <= 0.5\n"
            "Bounds\n 0 <= y <= 4\nBinaries\n x\nEnd\n")
    m = read_lp(io.StringIO(text))
    assert m.variables["x"][0] == "B"
    assert m.variables["y"] == ("C", 0.0, 4.0)
    assert m.objective == {"x": 3.0, "y": 2.0}
    assert m.constraints[1] == ("c2", {"x": 1.0, "y": -1.0}, "<=", 0.5)


def test_values_file_round_trip():
    vals = {"a": 1.0, "b_2_3": 0.123456789012345, CONST: 1.0}
    buf = io.StringIO()
    write_values(vals, buf)
    back = read_values(io.StringIO(buf.getvalue()))
    assert back.keys() == vals.keys()
    assert all(back[k] == pytest.approx(vals[k], rel=1e-11) for k in vals)
    with pytest.raises(LPFormatError) as err:
        read_values(io.StringIO("a 1\nb\n"))
    assert err.value.line == 2


def test_unknown_variables_are_reported():
    inst = tiny(0, customers=1)
    g = build(inst)
    m = build_full(inst, g)
    vals = solution_values(empty_solution(inst, g), inst, g, m)
    vals["nonsense"] = 1.0
    rep = check_solution(m, vals)
    assert rep.unknown == ["nonsense"] and not rep.ok


def test_integrality_and_bounds_checked():
    inst = tiny(0, customers=1)
    g = build(inst)
    m = build_full(inst, g)
    vals = solution_values(empty_solution(inst, g), inst, g, m)
    x = next(v for v in vals if v.startswith("x_"))
    vals[x] = 0.5
    names = {v["constraint"] for v in check_solution(m, vals).violations}
    assert f"integrality:{x}" in names
