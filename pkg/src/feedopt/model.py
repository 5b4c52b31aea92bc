"""Core data model: instances, solutions, objective and an independent validator.

Times are minutes, distances km, energy kWh. Coordinates are planar and all
travel times are Euclidean distance over a constant speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

EPS = 1e-6
INSTANCE_SCHEMA = "feedopt.instance/1"
SOLUTION_SCHEMA = "feedopt.solution/1"

Point = Tuple[float, float]


class StructuralError(ValueError):
    """Raised for malformed inputs (unknown node ids, broken routes)."""


@dataclass(frozen=True)
class Weights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    omega: float = 40.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.omega) < 0:
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True)
class Vehicle:
    capacity: int
    battery: float
    e_init: float
    e_min: float
    e_max: float
    consumption: float  # kWh per km

    def __post_init__(self):
        if self.capacity < 1 or self.consumption <= 0:
            raise ValueError("vehicle capacity >= 1 and consumption > 0 required")
        if not (self.e_min - EPS <= self.e_init <= self.e_max + EPS <= self.battery + 2 * EPS):
            raise ValueError("need e_min <= e_init <= e_max <= battery")


@dataclass(frozen=True)
class Station:
    loc: Point
    departures: Tuple[float, ...]


@dataclass(frozen=True)
class Charger:
    loc: Point
    rate: float  # kWh per minute


@dataclass(frozen=True)
class Request:
    origin: Point
    passengers: int
    station: int
    departure: float
    # (meeting point index, walk distance km, walk time min)
    reachable: Tuple[Tuple[int, float, float], ...]


@dataclass(frozen=True)
class Instance:
    horizon: float
    depot: Point
    meeting_points: Tuple[Point, ...]
    stations: Tuple[Station, ...]
    chargers: Tuple[Charger, ...]
    vehicles: Tuple[Vehicle, ...]
    requests: Tuple[Request, ...]
    weights: Weights = Weights()
    walk_speed: float = 0.085
    vehicle_speed: float = 0.83
    buffer_time: float = 10.0
    detour_factor: float = 1.5
    max_walk: float = 1.5
    service_time: float = 0.5
    name: str = ""

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.walk_speed <= 0 or self.vehicle_speed <= 0:
            raise ValueError("speeds must be positive")
        if any(c.rate <= 0 for c in self.chargers):
            raise ValueError("charging rates must be positive")
        if self.detour_factor < 1 or self.max_walk < 0:
            raise ValueError("detour factor >= 1 and max walk >= 0 required")
        for s in self.stations:
            if not any(0 <= d <= self.horizon for d in s.departures):
                raise ValueError("every station needs a departure inside the horizon")
        for r in self.requests:
            if r.passengers < 1:
                raise ValueError("requests carry at least one passenger")


def dist(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def travel_time(a: Point, b: Point, mode: str, inst: Instance) -> float:
    """Euclidean distance over walking or driving speed."""
    if mode == "walk":
        return dist(a, b) / inst.walk_speed
    if mode == "drive":
        return dist(a, b) / inst.vehicle_speed
    raise ValueError(f"unknown mode {mode!r}")


def max_ride_time(direct_time: float, detour_factor: float) -> float:
    if direct_time < 0:
        raise ValueError("direct time must be non-negative")
    return direct_time * detour_factor


def reachable_mps(origin: Point, mps: Sequence[Point], max_walk: float,
                  walk_speed: float) -> Tuple[Tuple[int, float, float], ...]:
    out = []
    for j, p in enumerate(mps):
        d = dist(origin, p)
        if d <= max_walk + 1e-12:
            out.append((j, d, d / walk_speed))
    return tuple(out)


# ---------------------------------------------------------------- solutions

@dataclass
class RoutePlan:
    """A vehicle route as a full node sequence with its schedule.

    Charger visits appear as charger dummy node ids; ``tau`` holds the
    charging duration at those positions and zero elsewhere.
    """
    vehicle: int
    nodes: List[int]
    A: List[float]
    B: List[float]
    W: List[float]
    q: List[float]
    E: List[float]
    tau: List[float]

    def used(self) -> bool:
        return len(self.nodes) > 2


@dataclass
class Solution:
    routes: List[RoutePlan]
    # meeting-point dummy node each request is grouped at (None = no meeting point)
    mp_of_request: List[Optional[int]]
    objective: float = 0.0
    meta: Dict[str, object] = field(default_factory=dict)

    def served_requests(self) -> List[Optional[int]]:
        """Vehicle serving each request, or None."""
        on_route: Dict[int, int] = {}
        for rp in self.routes:
            for n in rp.nodes:
                on_route[n] = rp.vehicle
        return [on_route.get(m) if m is not None else None for m in self.mp_of_request]

    def n_unserved(self) -> int:
        return sum(1 for v in self.served_requests() if v is None)

    def n_used(self) -> int:
        return sum(1 for rp in self.routes if rp.used())


def objective(sol: Solution, inst: Instance, graph=None) -> float:
    """Weighted sum of travel plus charging time, walking, station excess wait and rejections."""
    if graph is None:
        from .laygraph import build
        graph = build(inst)
    w = inst.weights
    travel = charge = wait = 0.0
    n_nodes = graph.n_nodes
    for rp in sol.routes:
        for i, n in enumerate(rp.nodes):
            if not 0 <= n < n_nodes:
                raise StructuralError(f"unknown node {n}")
            if i:
                travel += graph.t(rp.nodes[i - 1], n)
            charge += rp.tau[i]
            if graph.kind[n] == "station":
                wait += rp.W[i]
    walk = 0.0
    unserved = 0
    served = sol.served_requests()
    for r, k in enumerate(served):
        if k is None:
            unserved += 1
        else:
            walk += walk_time_to(inst, graph, r, sol.mp_of_request[r])
    return w.lambda1 * (travel + charge) + w.lambda2 * walk + w.lambda3 * wait + w.omega * unserved


def walk_time_to(inst: Instance, graph, r: int, node: int) -> float:
    mp = graph.mp_index[node]
    for j, _, t in inst.requests[r].reachable:
        if j == mp:
            return t
    raise StructuralError(f"request {r} cannot reach node {node}")


# ---------------------------------------------------------------- validator

def validate(sol: Solution, inst: Instance, graph) -> List[Dict[str, object]]:
    """Check every constraint family directly on the stored schedule.

    Returns a list of violation records; an empty list means feasible.
    """
    out: List[Dict[str, object]] = []

    def bad(family: str, **info):
        out.append(dict(family=family, **info))

    g = graph
    kind = g.kind
    nreq = len(inst.requests)
    if len(sol.mp_of_request) != nreq:
        bad("structure", detail="assignment length mismatch")
        return out
    # walk limit
    for r, m in enumerate(sol.mp_of_request):
        if m is None:
            continue
        if not (0 <= m < g.n_nodes) or kind[m] != "mp":
            bad("walk_limit", request=r, detail="not a meeting point node")
            continue
        if g.layer_of_node[m] != g.layer_of_request[r]:
            bad("walk_limit", request=r, detail="meeting point on another layer")
            continue
        if not any(j == g.mp_index[m] and d <= inst.max_walk + EPS for j, d, _ in inst.requests[r].reachable):
            bad("walk_limit", request=r)
    seen_vehicle = set()
    visits: Dict[int, int] = {}
    for rp in sol.routes:
        k = rp.vehicle
        if not 0 <= k < len(inst.vehicles) or k in seen_vehicle:
            bad("structure", vehicle=k, detail="bad or duplicate vehicle")
            continue
        seen_vehicle.add(k)
        veh = inst.vehicles[k]
        nodes = rp.nodes
        n = len(nodes)
        if any(len(a) != n for a in (rp.A, rp.B, rp.W, rp.q, rp.E, rp.tau)):
            bad("structure", vehicle=k, detail="schedule length mismatch")
            continue
        if n < 2 or nodes[0] != g.depot_start or nodes[-1] != g.depot_end:
            bad("flow", vehicle=k, detail="route must run depot to depot")
            continue
        if any(not 0 <= v < g.n_nodes for v in nodes):
            bad("structure", vehicle=k, detail="unknown node")
            continue
        for v in nodes[1:-1]:
            if v in (g.depot_start, g.depot_end):
                bad("flow", vehicle=k, detail="depot inside route")
        for i in range(n - 1):
            if not g.has_arc(nodes[i], nodes[i + 1]):
                bad("flow", vehicle=k, arc=[nodes[i], nodes[i + 1]], detail="arc not in graph")
        for v in nodes[1:-1]:
            if kind[v] in ("mp", "charger"):
                visits[v] = visits.get(v, 0) + 1
        # E0 and energy balance
        if abs(rp.E[0] - veh.e_init) > EPS:
            bad("energy", vehicle=k, detail="initial energy")
        load = 0.0
        pick_time: Dict[int, float] = {}
        for i in range(n):
            v = nodes[i]
            kv = kind[v]
            if rp.E[i] < veh.e_min - EPS or rp.E[i] > veh.e_max + EPS:
                bad("energy", vehicle=k, node=v, detail="bounds")
            if rp.B[i] < g.e[v] - EPS or rp.B[i] > g.l[v] + EPS:
                bad("time_window", vehicle=k, node=v)
            if kv != "charger" and rp.tau[i] != 0:
                bad("energy", vehicle=k, node=v, detail="charging away from charger")
            if rp.tau[i] < -EPS:
                bad("energy", vehicle=k, node=v, detail="negative charge")
            if i == 0:
                if rp.q[i] != 0:
                    bad("load", vehicle=k, node=v)
                continue
            u = nodes[i - 1]
            t = g.t(u, v)
            if kind[u] == "charger":
                if rp.B[i] < rp.B[i - 1] + rp.tau[i - 1] + t - EPS:
                    bad("time_propagation", vehicle=k, node=v)
                e_exp = rp.E[i - 1] + inst.chargers[g.charger_index[u]].rate * rp.tau[i - 1] - veh.consumption * g.c(u, v)
            else:
                if rp.B[i] < rp.B[i - 1] + g.u[u] + t - EPS:
                    bad("time_propagation", vehicle=k, node=v)
                e_exp = rp.E[i - 1] - veh.consumption * g.c(u, v)
            if abs(rp.E[i] - e_exp) > EPS:
                bad("energy", vehicle=k, node=v, detail="balance")
            if kv == "station":
                a_exp = rp.B[i - 1] + t + g.u[u]
                if abs(rp.A[i] - a_exp) > EPS:
                    bad("time_propagation", vehicle=k, node=v, detail="arrival")
                if rp.W[i] < rp.B[i] - rp.A[i] - EPS or rp.W[i] < -EPS:
                    bad("wait", vehicle=k, node=v)
            if kv == "mp":
                load += sum(inst.requests[r].passengers for r in g_requests_at(sol, v))
                pick_time[v] = rp.B[i]
            elif kv == "station":
                lay = g.layer_of_node[v]
                for m, tb in list(pick_time.items()):
                    if g.layer_of_node[m] == lay:
                        ride = rp.A[i] - tb - g.u[m]
                        if ride > g.ride_limit[m] + EPS:
                            bad("ride_time", vehicle=k, node=m)
                        del pick_time[m]
                load = 0.0
            if abs(rp.q[i] - load) > EPS:
                bad("load", vehicle=k, node=v, detail="load bookkeeping")
            if load > veh.capacity + EPS:
                bad("load", vehicle=k, node=v)
        if pick_time:
            bad("pairing", vehicle=k, nodes=sorted(pick_time), detail="pickup without drop-off")
    for v, c in visits.items():
        if c > 1:
            bad("visit_once", node=v)
    for k in range(len(inst.vehicles)):
        if k not in seen_vehicle:
            bad("flow", vehicle=k, detail="vehicle has no route")
    # charger non-overlap on each physical charger
    events: Dict[int, List[Tuple[float, float]]] = {}
    for rp in sol.routes:
        for i, v in enumerate(rp.nodes):
            if kind[v] == "charger":
                if rp.B[i] < -EPS or rp.B[i] + rp.tau[i] > inst.horizon + EPS:
                    bad("charger_sync", node=v, detail="event outside horizon")
                events.setdefault(g.charger_index[v], []).append((rp.B[i], rp.B[i] + rp.tau[i]))
    for o, evs in events.items():
        evs.sort()
        for a, b in zip(evs, evs[1:]):
            if b[0] < a[1] - EPS:
                bad("charger_sync", charger=o, events=[list(a), list(b)])
    return out


def g_requests_at(sol: Solution, node: int) -> List[int]:
    idx = getattr(sol, "_req_index", None)
    if idx is None:
        idx = {}
        for r, m in enumerate(sol.mp_of_request):
            if m is not None:
                idx.setdefault(m, []).append(r)
        sol._req_index = idx  # type: ignore[attr-defined]
    return idx.get(node, [])


# ---------------------------------------------------------------- JSON

def instance_to_dict(inst: Instance) -> dict:
    return {
        "schema": INSTANCE_SCHEMA,
        "name": inst.name,
        "T": inst.horizon,
        "depot": list(inst.depot),
        "G": [list(p) for p in inst.meeting_points],
        "D": [{"loc": list(s.loc), "departures": list(s.departures)} for s in inst.stations],
        "S": [{"loc": list(c.loc), "alpha": c.rate} for c in inst.chargers],
        "K": [{"Q": v.capacity, "B_bar": v.battery, "E_init": v.e_init, "E_min": v.e_min,
               "E_max": v.e_max, "beta": v.consumption} for v in inst.vehicles],
        "R": [{"origin": list(r.origin), "g": r.passengers, "station": r.station,
               "departure": r.departure, "reachable": [list(x) for x in r.reachable]}
              for r in inst.requests],
        "weights": {"lambda1": inst.weights.lambda1, "lambda2": inst.weights.lambda2,
                    "lambda3": inst.weights.lambda3, "omega": inst.weights.omega},
        "walk_speed": inst.walk_speed,
        "vehicle_speed": inst.vehicle_speed,
        "buffer_time": inst.buffer_time,
        "detour_factor": inst.detour_factor,
        "w_max": inst.max_walk,
        "u": inst.service_time,
    }


def instance_from_dict(d: dict) -> Instance:
    if d.get("schema") != INSTANCE_SCHEMA:
        raise StructuralError(f"unsupported instance schema {d.get('schema')!r}")
    return Instance(
        name=d.get("name", ""),
        horizon=float(d["T"]),
        depot=tuple(d["depot"]),
        meeting_points=tuple(tuple(p) for p in d["G"]),
        stations=tuple(Station(tuple(s["loc"]), tuple(float(x) for x in s["departures"])) for s in d["D"]),
        chargers=tuple(Charger(tuple(c["loc"]), float(c["alpha"])) for c in d["S"]),
        vehicles=tuple(Vehicle(int(v["Q"]), float(v["B_bar"]), float(v["E_init"]), float(v["E_min"]),
                               float(v["E_max"]), float(v["beta"])) for v in d["K"]),
        requests=tuple(Request(tuple(r["origin"]), int(r["g"]), int(r["station"]), float(r["departure"]),
                               tuple((int(a), float(b), float(c)) for a, b, c in r["reachable"]))
                       for r in d["R"]),
        weights=Weights(**d["weights"]),
        walk_speed=float(d["walk_speed"]),
        vehicle_speed=float(d["vehicle_speed"]),
        buffer_time=float(d["buffer_time"]),
        detour_factor=float(d["detour_factor"]),
        max_walk=float(d["w_max"]),
        service_time=float(d["u"]),
    )


def solution_to_dict(sol: Solution) -> dict:
    served = sol.served_requests()
    return {
        "schema": SOLUTION_SCHEMA,
        "objective": sol.objective,
        "routes": [{"vehicle": rp.vehicle, "nodes": rp.nodes, "A": rp.A, "B": rp.B, "W": rp.W,
                    "q": rp.q, "E": rp.E, "tau": rp.tau} for rp in sol.routes],
        "mp_of_request": sol.mp_of_request,
        "y": [None if k is None else [k, sol.mp_of_request[r]] for r, k in enumerate(served)],
        "meta": sol.meta,
    }


def solution_from_dict(d: dict) -> Solution:
    if d.get("schema") != SOLUTION_SCHEMA:
        raise StructuralError(f"unsupported solution schema {d.get('schema')!r}")
    routes = [RoutePlan(int(r["vehicle"]), [int(x) for x in r["nodes"]], [float(x) for x in r["A"]],
                        [float(x) for x in r["B"]], [float(x) for x in r["W"]], [float(x) for x in r["q"]],
                        [float(x) for x in r["E"]], [float(x) for x in r["tau"]]) for r in d["routes"]]
    return Solution(routes, [None if m is None else int(m) for m in d["mp_of_request"]],
                    float(d["objective"]), dict(d.get("meta", {})))


def dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)
