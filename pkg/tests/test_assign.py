import itertools

import pytest

from feedopt.assign import assign_flat, assign_layered, layer_value, rho_vector, tune_rho
from feedopt.laygraph import build

from conftest import make_instance


def brute_layer(inst, g, li, rho):
    """Exhaustive minimum over activation sets of one layer."""
    L = g.layers[li]
    nodes = L.mp_nodes
    qmax = max(v.capacity for v in inst.vehicles)
    walk = [{g.mp_node[(li, j)]: t for j, _, t in inst.requests[r].reachable} for r in L.requests]
    best = float("inf")
    for k in range(1, len(nodes) + 1):
        for act in itertools.combinations(nodes, k):
            pick = []
            for wk in walk:
                opts = [(wk[n], n) for n in act if n in wk]
                if not opts:
                    break
                pick.append(min(opts))
            else:
                counts = {}
                for _, n in pick:
                    counts[n] = counts.get(n, 0) + 1
                if max(counts.values()) > qmax:
                    continue
                pairs = sum(g.t(a, b) for a in act for b in act if a != b)
                v = inst.weights.lambda2 * sum(t for t, _ in pick) + inst.weights.lambda1 * rho * pairs
                best = min(best, v)
    return best


@pytest.mark.parametrize("seed", range(6))
def test_layered_matches_brute_force(seed):
    inst = make_instance(14, seed, profile="offpeak")
    g = build(inst)
    for rho in (0.0, 0.2, 1.0):
        asg = assign_layered(g, inst, rho)
        assert asg.proven
        for li in g.active:
            if len(g.layers[li].mp_nodes) > 12:
                continue
            assert asg.layer_value[li] == pytest.approx(brute_layer(inst, g, li, rho), abs=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_layered_equals_flat(seed):
    inst = make_instance(40, seed, profile="peak" if seed % 2 else "offpeak", max_walk=1.0, mp_spacing=1.2)
    g = build(inst)
    a = assign_layered(g, inst, 0.3)
    b = assign_flat(g, inst, 0.3)
    assert a.value == pytest.approx(b.value, abs=1e-6)


def test_assignment_invariants():
    inst = make_instance(60, 11, profile="peak", max_walk=1.0, mp_spacing=1.2)
    g = build(inst)
    asg = assign_layered(g, inst, 0.2)
    qmax = max(v.capacity for v in inst.vehicles)
    counts = {}
    for r, m in enumerate(asg.mp_of_request):
        assert m is not None
        assert g.layer_of_node[m] == g.layer_of_request[r]
        assert g.mp_index[m] in {j for j, _, _ in inst.requests[r].reachable}
        counts[m] = counts.get(m, 0) + 1
    assert max(counts.values()) <= qmax
    assert asg.activated == sorted(counts)
    for li in g.active:
        act = [m for m in asg.activated if g.layer_of_node[m] == li]
        assert layer_value(g, inst, li, 0.2, act) == pytest.approx(asg.layer_value[li])


def test_rho_zero_picks_nearest():
    inst = make_instance(30, 2)
    g = build(inst)
    asg = assign_layered(g, inst, 0.0)
    for r, m in enumerate(asg.mp_of_request):
        nearest = min(inst.requests[r].reachable, key=lambda x: x[2])
        assert inst.requests[r].reachable[[j for j, _, _ in inst.requests[r].reachable].index(g.mp_index[m])][2] \
            == pytest.approx(nearest[2])


def test_large_rho_concentrates():
    inst = make_instance(30, 2, profile="peak", max_walk=1.0, mp_spacing=1.2)
    g = build(inst)
    assert len(assign_layered(g, inst, 5.0).activated) <= len(assign_layered(g, inst, 0.0).activated)


def test_single_request_single_candidate():
    inst = make_instance(1, 0, max_walk=0.6)
    g = build(inst)
    asg = assign_layered(g, inst, 0.2)
    reach = inst.requests[0].reachable
    if len(reach) == 1:
        assert asg.layer_value[g.active[0]] == pytest.approx(reach[0][2])


def test_unreachable_request_left_unassigned():
    inst = make_instance(20, 5, max_walk=0.2)
    g = build(inst)
    asg = assign_layered(g, inst, 0.2)
    for r, req in enumerate(inst.requests):
        assert (asg.mp_of_request[r] is None) == (not req.reachable)


def test_node_limit_is_reproducible():
    inst = make_instance(80, 3, profile="peak")
    g = build(inst)
    a = assign_layered(g, inst, 0.2, node_limit=50)
    b = assign_layered(g, inst, 0.2, node_limit=50)
    assert a.to_dict() == b.to_dict()


def test_rho_vector_forms():
    assert rho_vector(0.3, [1, 4]) == {1: 0.3, 4: 0.3}
    assert rho_vector({1: 0.1, 4: 0.2}, [1, 4]) == {1: 0.1, 4: 0.2}
    with pytest.raises(ValueError):
        rho_vector(-1.0, [0])


def test_tune_rho_respects_budget_and_prefers_best():
    inst = make_instance(10, 1)
    g = build(inst)
    calls = []

    def evaluate(vec):
        v = next(iter(vec.values()))
        calls.append(v)
        return abs(v - 0.6), []

    best = tune_rho(inst, g, evaluate, budget=15)
    assert len(calls) <= 15
    assert all(v == pytest.approx(0.6) for v in best.values())
    with pytest.raises(ValueError):
        tune_rho(inst, g, evaluate, budget=2)


def test_tune_rho_scales_unserved_layers():
    inst = make_instance(10, 1, profile="offpeak")
    g = build(inst)
    bad_layer = g.active[0]

    def evaluate(vec):
        # lower objective when the unserved layer gets a larger rho
        return 10.0 - vec[bad_layer], [bad_layer] if vec[bad_layer] < 1.0 else []

    best = tune_rho(inst, g, evaluate, budget=30, grid=[0.2])
    assert best[bad_layer] > 0.2
    others = [li for li in g.active if li != bad_layer]
    assert all(best[li] == pytest.approx(0.3) or best[li] == pytest.approx(0.2) for li in others)
