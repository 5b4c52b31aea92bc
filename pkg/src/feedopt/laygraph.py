"""Layered directed graph over dummy nodes.

One layer per (station, timetabled departure). Each active layer owns a copy
of the station and copies of the meeting points some request of that layer
can walk to. Physical chargers get ``active layers + 1`` one-visit copies.
Arcs are never stored for search; ``has_arc`` answers membership in O(1)
from the arc-class rules and ``arcs()`` enumerates them for export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .model import Instance, StructuralError, max_ride_time


class EmptyGraphError(StructuralError):
    pass


@dataclass
class Layer:
    index: int
    station: int
    departure: float
    e: float
    l: float
    requests: List[int] = field(default_factory=list)
    mp_nodes: List[int] = field(default_factory=list)
    station_node: int = -1

    @property
    def active(self) -> bool:
        return bool(self.requests)


class LayeredGraph:
    def __init__(self, inst: Instance):
        self.inst = inst
        deps = sorted((d, s) for s, st in enumerate(inst.stations) for d in st.departures)
        if not deps:
            raise EmptyGraphError("no timetabled departures")
        self.layers: List[Layer] = [
            Layer(i, s, d, d - inst.buffer_time, d) for i, (d, s) in enumerate(deps)]
        key = {(L.station, L.departure): L.index for L in self.layers}
        self.layer_of_request: List[int] = []
        for r, req in enumerate(inst.requests):
            li = key.get((req.station, req.departure))
            if li is None:
                raise StructuralError(f"request {r} departure {req.departure} not in timetable")
            self.layer_of_request.append(li)
            self.layers[li].requests.append(r)
        self.active = [L.index for L in self.layers if L.active]

        # physical locations: depot, meeting points, stations, chargers
        nG, nD, nS = len(inst.meeting_points), len(inst.stations), len(inst.chargers)
        pts = [inst.depot] + list(inst.meeting_points) + [s.loc for s in inst.stations] + [c.loc for c in inst.chargers]
        arr = np.asarray(pts, dtype=float).reshape(-1, 2)
        dm = np.hypot(arr[:, None, 0] - arr[None, :, 0], arr[:, None, 1] - arr[None, :, 1])
        self.dmat: List[List[float]] = dm.tolist()
        self.tmat: List[List[float]] = (dm / inst.vehicle_speed).tolist()
        self.loc_mp0, self.loc_st0, self.loc_ch0 = 1, 1 + nG, 1 + nG + nD

        kind: List[str] = ["depot"]
        loc: List[int] = [0]
        layer_of_node: List[int] = [-1]
        mp_index: List[int] = [-1]
        charger_index: List[int] = [-1]
        for li in self.active:
            L = self.layers[li]
            L.station_node = len(kind)
            kind.append("station"); loc.append(self.loc_st0 + L.station)
            layer_of_node.append(li); mp_index.append(-1); charger_index.append(-1)
            mps = sorted({j for r in L.requests for j, _, _ in inst.requests[r].reachable})
            for j in mps:
                L.mp_nodes.append(len(kind))
                kind.append("mp"); loc.append(self.loc_mp0 + j)
                layer_of_node.append(li); mp_index.append(j); charger_index.append(-1)
        self.n_charger_copies = len(self.active) + 1
        self.charger_dummies: List[List[int]] = []
        for o in range(nS):
            ids = []
            for _ in range(self.n_charger_copies):
                ids.append(len(kind))
                kind.append("charger"); loc.append(self.loc_ch0 + o)
                layer_of_node.append(-1); mp_index.append(-1); charger_index.append(o)
            self.charger_dummies.append(ids)
        kind.append("depot"); loc.append(0); layer_of_node.append(-1); mp_index.append(-1); charger_index.append(-1)
        self.kind, self.loc = kind, loc
        self.layer_of_node, self.mp_index, self.charger_index = layer_of_node, mp_index, charger_index
        self.n_nodes = len(kind)
        self.depot_start, self.depot_end = 0, self.n_nodes - 1
        self.mp_node: Dict[Tuple[int, int], int] = {}
        for li in self.active:
            for n in self.layers[li].mp_nodes:
                self.mp_node[(li, mp_index[n])] = n

        # windows, service times, ride limits
        T, u = inst.horizon, inst.service_time
        self.e = [0.0] * self.n_nodes
        self.l = [T] * self.n_nodes
        self.u = [0.0] * self.n_nodes
        self.ride_limit = [0.0] * self.n_nodes
        self.station_node_of_layer: Dict[int, int] = {}
        for li in self.active:
            L = self.layers[li]
            sn = L.station_node
            self.station_node_of_layer[li] = sn
            self.e[sn], self.l[sn], self.u[sn] = L.e, L.l, u
            for n in L.mp_nodes:
                direct = self.t(n, sn)
                self.u[n] = u
                self.l[n] = L.l - direct - u
                self.ride_limit[n] = max_ride_time(direct, inst.detour_factor)

        nl = len(self.layers)
        self.compat = [[False] * nl for _ in range(nl)]
        for a in range(nl):
            for b in range(a + 1, nl):
                self.compat[a][b] = self._compat_raw(a, b)

        self.walk_arcs: List[Tuple[int, int, float]] = []
        for r, req in enumerate(inst.requests):
            li = self.layer_of_request[r]
            for j, _, tw in req.reachable:
                self.walk_arcs.append((r, self.mp_node[(li, j)], tw))

    # ------------------------------------------------------------ queries
    def t(self, i: int, j: int) -> float:
        return self.tmat[self.loc[i]][self.loc[j]]

    def c(self, i: int, j: int) -> float:
        return self.dmat[self.loc[i]][self.loc[j]]

    def _station_time(self, a: int, b: int) -> float:
        La, Lb = self.layers[a], self.layers[b]
        return self.tmat[self.loc_st0 + La.station][self.loc_st0 + Lb.station]

    def _compat_raw(self, a: int, b: int) -> bool:
        return self.layers[a].e + self._station_time(a, b) <= self.layers[b].l

    def compatible(self, a: int, b: int) -> bool:
        """Layers a < b (in sorted order) can be served in sequence by one vehicle."""
        if a >= b:
            raise ValueError("compatibility is defined for a < b")
        return self.compat[a][b]

    def layer_of(self, r: int) -> int:
        if not 0 <= r < len(self.layer_of_request):
            raise StructuralError(f"unknown request {r}")
        return self.layer_of_request[r]

    def _vertical(self, li: int, lj: int) -> bool:
        if li < lj:
            return self.compat[li][lj]
        if li > lj:
            # descending copy only when both orientations pass
            t = self._station_time(lj, li)
            return self.compat[lj][li] and self.layers[li].e + t <= self.layers[lj].l
        return False

    def has_arc(self, i: int, j: int) -> bool:
        if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
            raise StructuralError(f"unknown node in ({i}, {j})")
        if i == j or i == self.depot_end or j == self.depot_start:
            return False
        ki, kj = self.kind[i], self.kind[j]
        if i == self.depot_start:
            return kj in ("mp", "charger") or j == self.depot_end
        if ki == "charger":
            return kj == "mp" or j == self.depot_end
        li, lj = self.layer_of_node[i], self.layer_of_node[j]
        if ki == "station":
            if j == self.depot_end or kj == "charger":
                return True
            if kj == "mp":
                return lj > li and self.compat[li][lj]
            if kj == "station":
                return self.loc[i] == self.loc[j] and self._vertical(li, lj)
            return False
        if ki == "mp":
            if kj == "mp":
                if li == lj:
                    return True
                return self.loc[i] == self.loc[j] and self._vertical(li, lj)
            if kj == "station":
                return li == lj
        return False

    lookup = has_arc

    def arcs(self) -> Iterator[Tuple[int, int]]:
        """Enumerate every bus arc (for export); order is deterministic."""
        for i in range(self.n_nodes):
            for j in self._succ_candidates(i):
                if self.has_arc(i, j):
                    yield i, j

    def _succ_candidates(self, i: int) -> List[int]:
        ki = self.kind[i]
        chargers = [n for ids in self.charger_dummies for n in ids]
        mps = [n for li in self.active for n in self.layers[li].mp_nodes]
        stations = [self.layers[li].station_node for li in self.active]
        if i == self.depot_start:
            return mps + chargers + [self.depot_end]
        if ki == "charger":
            return mps + [self.depot_end]
        if ki == "station":
            return mps + stations + chargers + [self.depot_end]
        if ki == "mp":
            li = self.layer_of_node[i]
            same_loc = [n for n in mps if self.loc[n] == self.loc[i] and self.layer_of_node[n] != li]
            return self.layers[li].mp_nodes + same_loc + [self.layers[li].station_node]
        return []

    def to_json(self) -> str:
        return json.dumps({
            "layers": [{"index": L.index, "station": L.station, "departure": L.departure, "e": L.e,
                        "l": L.l, "requests": L.requests, "mp_nodes": L.mp_nodes,
                        "station_node": L.station_node} for L in self.layers],
            "active": self.active,
            "kind": self.kind,
            "charger_dummies": self.charger_dummies,
        }, sort_keys=True)


def build(inst: Instance) -> LayeredGraph:
    return LayeredGraph(inst)
