import itertools

import pytest

from feedopt.laygraph import build
from feedopt.model import StructuralError

from conftest import make_instance


@pytest.fixture(scope="module")
def case():
    inst = make_instance(25, 2, profile="offpeak")
    return inst, build(inst)


def test_one_station_node_per_active_layer(case):
    inst, g = case
    stations = [n for n, k in enumerate(g.kind) if k == "station"]
    assert len(stations) == len(g.active)
    for li in g.active:
        L = g.layers[li]
        assert g.kind[L.station_node] == "station"
        assert g.layer_of_node[L.station_node] == li
        assert g.station_node_of_layer[li] == L.station_node


def test_mp_nodes_are_union_of_reachable(case):
    inst, g = case
    for li in g.active:
        L = g.layers[li]
        want = sorted({j for r in L.requests for j, _, _ in inst.requests[r].reachable})
        assert [g.mp_index[n] for n in L.mp_nodes] == want
        for n in L.mp_nodes:
            assert g.mp_node[(li, g.mp_index[n])] == n


def test_inactive_layers_have_no_nodes(case):
    _, g = case
    for L in g.layers:
        if not L.active:
            assert L.mp_nodes == [] and L.station_node == -1


def test_charger_copies(case):
    inst, g = case
    assert len(g.charger_dummies) == len(inst.chargers)
    for o, ids in enumerate(g.charger_dummies):
        assert len(ids) == len(g.active) + 1
        assert all(g.kind[n] == "charger" and g.charger_index[n] == o for n in ids)


def test_node_count(case):
    inst, g = case
    n_mp = sum(len(g.layers[li].mp_nodes) for li in g.active)
    expect = 2 + len(g.active) + n_mp + len(inst.chargers) * (len(g.active) + 1)
    assert g.n_nodes == expect
    assert g.kind[g.depot_start] == g.kind[g.depot_end] == "depot"


def test_time_windows(case):
    inst, g = case
    for li in g.active:
        L = g.layers[li]
        sn = L.station_node
        assert g.e[sn] == pytest.approx(L.departure - inst.buffer_time)
        assert g.l[sn] == pytest.approx(L.departure)
        for n in L.mp_nodes:
            direct = g.t(n, sn)
            assert g.l[n] == pytest.approx(L.departure - direct - inst.service_time)
            assert g.ride_limit[n] == pytest.approx(direct * inst.detour_factor)


def test_walk_arcs_match_requests(case):
    inst, g = case
    got = sorted(g.walk_arcs)
    want = sorted((r, g.mp_node[(g.layer_of_request[r], j)], tw)
                  for r, req in enumerate(inst.requests) for j, _, tw in req.reachable)
    assert got == want


def test_arcs_agree_with_lookup(case):
    _, g = case
    listed = set(g.arcs())
    brute = {(i, j) for i, j in itertools.product(range(g.n_nodes), repeat=2) if g.has_arc(i, j)}
    assert listed == brute


def test_arc_structure(case):
    _, g = case
    for i, j in g.arcs():
        assert j != g.depot_start and i != g.depot_end
        ki, kj = g.kind[i], g.kind[j]
        if ki == "mp" and kj == "station":
            assert g.layer_of_node[i] == g.layer_of_node[j]
        if ki == "mp" and kj == "mp" and g.layer_of_node[i] != g.layer_of_node[j]:
            assert g.loc[i] == g.loc[j]
        if ki == "station" and kj == "mp":
            li, lj = g.layer_of_node[i], g.layer_of_node[j]
            assert lj > li and g.compatible(li, lj)
        assert not (ki == "mp" and kj in ("charger", "depot"))


def test_compatibility_definition(case):
    _, g = case
    for a, b in itertools.combinations(range(len(g.layers)), 2):
        La, Lb = g.layers[a], g.layers[b]
        t = g.tmat[g.loc_st0 + La.station][g.loc_st0 + Lb.station]
        assert g.compatible(a, b) == (La.e + t <= Lb.l)
    with pytest.raises(ValueError):
        g.compatible(1, 1)


def test_unknown_request_and_node(case):
    _, g = case
    with pytest.raises(StructuralError):
        g.layer_of(10 ** 6)
    with pytest.raises(StructuralError):
        g.has_arc(0, 10 ** 6)


def test_graph_json_deterministic():
    a = build(make_instance(10, 4))
    b = build(make_instance(10, 4))
    assert a.to_json() == b.to_json()
