"""Seeded scenario generator (grid city and ring around a central station) and KPI report."""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .model import (Charger, Instance, Request, Solution, Station, Vehicle, Weights, dist,
                    reachable_mps)

# two vehicle types: (capacity, battery kWh, consumption kWh/km)
VEHICLE_TYPES = ((10, 35.775, 0.24), (20, 53.70, 0.29))
E_INIT_STEPS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass
class StationSpec:
    loc: Tuple[float, float]
    first: float          # first departure, minutes after time zero
    last: float
    per_hour: int = 3


@dataclass
class ScenarioSpec:
    customers: int = 20
    seed: int = 0
    geometry: str = "grid"                 # "grid" or "ring"
    width: float = 6.0                     # grid city extent (km)
    height: float = 6.0
    inner_radius: float = 1.5              # ring geometry
    outer_radius: float = 6.0
    mp_spacing: float = 1.0
    mp_count: Optional[int] = None         # ring only: exact count via a sunflower layout
    stations: List[StationSpec] = field(default_factory=list)
    chargers_per_station: int = 2
    charge_rate: float = 0.83
    depot: Optional[Tuple[float, float]] = None
    profile: str = "peak"                  # "peak" or "offpeak"
    peak_mean: float = 150.0               # 8:00 with time zero at 5:30
    peak_sd: float = 20.0
    max_walk: float = 1.5
    max_group: int = 1
    fleet: Tuple[int, int] = (2, 2)        # count of each vehicle type
    e_init: object = "steps"               # "steps" cycles 20..80 %, or [lo, hi] uniform fraction
    weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 40.0)
    horizon_tail: float = 60.0
    name: str = ""

    def __post_init__(self):
        if self.mp_spacing <= 0:
            raise ValueError("mp spacing must be positive")
        if self.geometry == "ring" and not self.inner_radius < self.outer_radius:
            raise ValueError("inner radius must be below outer radius")
        if self.geometry not in ("grid", "ring"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.profile not in ("peak", "offpeak"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.customers < 0 or self.max_group < 1:
            raise ValueError("customer count >= 0 and group size >= 1 required")
        self.stations = [s if isinstance(s, StationSpec) else StationSpec(**s) for s in self.stations]
        if not self.stations:
            self.stations = default_stations(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        for key in ("depot", "fleet", "weights"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("stations"):
            d["stations"] = [StationSpec(tuple(s["loc"]), s["first"], s["last"], s.get("per_hour", 3))
                             for s in d["stations"]]
        return cls(**d)


def default_stations(spec: ScenarioSpec) -> List[StationSpec]:
    # 6:00-10:00 every 20 min at the first station, offset by 10 min at the second
    if spec.geometry == "ring":
        return [StationSpec((0.0, 0.0), 30.0, 270.0)]
    w, h = spec.width, spec.height
    return [StationSpec((w * 0.25, h * 0.5), 30.0, 270.0),
            StationSpec((w * 0.75, h * 0.5), 40.0, 280.0)]


def timetable(s: StationSpec) -> Tuple[float, ...]:
    step = 60.0 / s.per_hour
    n = int(math.floor((s.last - s.first) / step + 1e-9)) + 1
    return tuple(round(s.first + i * step, 9) for i in range(n))


def meeting_points(spec: ScenarioSpec) -> List[Tuple[float, float]]:
    if spec.geometry == "grid":
        nx = int(math.floor(spec.width / spec.mp_spacing + 1e-9))
        ny = int(math.floor(spec.height / spec.mp_spacing + 1e-9))
        return [(i * spec.mp_spacing, j * spec.mp_spacing) for j in range(ny + 1) for i in range(nx + 1)]
    if spec.mp_count is not None:
        return sunflower(spec.mp_count, spec.inner_radius, spec.outer_radius)
    R, s = spec.outer_radius, spec.mp_spacing
    k = int(math.floor(R / s))
    pts = []
    for j in range(-k, k + 1):
        for i in range(-k, k + 1):
            x, y = i * s, j * s
            if math.hypot(x, y) <= R + 1e-9:
                pts.append((x, y))
    return pts


def sunflower(n: int, r_in: float, r_out: float) -> List[Tuple[float, float]]:
    """n points spread evenly over an annulus (golden-angle spiral)."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    pts = []
    for i in range(n):
        frac = (i + 0.5) / n
        r = math.sqrt(r_in * r_in + frac * (r_out * r_out - r_in * r_in))
        a = i * golden
        pts.append((round(r * math.cos(a), 9), round(r * math.sin(a), 9)))
    return pts


def _origin(spec: ScenarioSpec, rng: random.Random) -> Tuple[float, float]:
    if spec.geometry == "grid":
        return rng.uniform(0.0, spec.width), rng.uniform(0.0, spec.height)
    r = math.sqrt(rng.uniform(spec.inner_radius ** 2, spec.outer_radius ** 2))
    a = rng.uniform(0.0, 2.0 * math.pi)
    return r * math.cos(a), r * math.sin(a)


def _slot_weights(deps: Sequence[float], spec: ScenarioSpec) -> List[float]:
    if spec.profile == "offpeak":
        return [1.0] * len(deps)
    return [math.exp(-0.5 * ((d - spec.peak_mean) / spec.peak_sd) ** 2) for d in deps]


def generate(spec: ScenarioSpec, report: Optional[dict] = None) -> Instance:
    rng = random.Random(spec.seed)
    mps = meeting_points(spec)
    tables = [timetable(s) for s in spec.stations]
    stations = tuple(Station(tuple(s.loc), t) for s, t in zip(spec.stations, tables))
    chargers = tuple(Charger(tuple(s.loc), spec.charge_rate)
                     for s in spec.stations for _ in range(spec.chargers_per_station))
    depot = spec.depot
    if depot is None:
        depot = (spec.width / 2, spec.height / 2) if spec.geometry == "grid" else (0.0, 0.0)
    walk_speed = 0.085
    requests = []
    unreachable = []
    for r in range(spec.customers):
        origin = _origin(spec, rng)
        s = rng.randrange(len(stations))
        deps = tables[s]
        dep = rng.choices(deps, weights=_slot_weights(deps, spec))[0]
        g = rng.randint(1, spec.max_group) if spec.max_group > 1 else 1
        reach = reachable_mps(origin, mps, spec.max_walk, walk_speed)
        if not reach:
            unreachable.append(r)
        requests.append(Request((round(origin[0], 9), round(origin[1], 9)), g, s, dep, reach))
    vehicles = []
    for type_id, count in enumerate(spec.fleet):
        cap, bat, beta = VEHICLE_TYPES[type_id]
        for _ in range(count):
            if spec.e_init == "steps":
                frac = E_INIT_STEPS[len(vehicles) % len(E_INIT_STEPS)]
            else:
                lo, hi = spec.e_init
                frac = rng.uniform(lo, hi)
            vehicles.append(Vehicle(cap, bat, round(frac * bat, 9), 0.1 * bat, 0.8 * bat, beta))
    horizon = max(max(t) for t in tables) + spec.horizon_tail
    inst = Instance(horizon, tuple(depot), tuple(mps), stations, chargers, tuple(vehicles), tuple(requests),
                    Weights(*spec.weights), walk_speed=walk_speed, max_walk=spec.max_walk,
                    name=spec.name or f"{spec.geometry}-{spec.profile}-{spec.customers}-s{spec.seed}")
    if report is not None:
        report["unreachable_requests"] = unreachable
        report["meeting_points"] = len(mps)
        report["layers"] = sum(len(t) for t in tables)
        report["suggested_fleet"] = suggest_fleet(inst)
    return inst


def suggest_fleet(inst: Instance, occupancy: float = 0.7) -> int:
    """Vehicles needed so the busiest departure is served at the target occupancy (advisory)."""
    if not inst.requests:
        return 0
    per_slot: Dict[Tuple[int, float], int] = {}
    for r in inst.requests:
        per_slot[(r.station, r.departure)] = per_slot.get((r.station, r.departure), 0) + r.passengers
    cap = max((v.capacity for v in inst.vehicles), default=VEHICLE_TYPES[0][0])
    return int(math.ceil(max(per_slot.values()) / (occupancy * cap)))


# ---------------------------------------------------------------- KPIs

def kpis(sol: Solution, inst: Instance, graph) -> Dict[str, float]:
    served = sol.served_requests()
    n_served = sum(1 for v in served if v is not None)
    walk_km = 0.0
    for r, v in enumerate(served):
        if v is None:
            continue
        j = graph.mp_index[sol.mp_of_request[r]]
        walk_km += next(d for m, d, _ in inst.requests[r].reachable if m == j)
    kmt = ride_sum = wait_sum = charge = 0.0
    n_ride = n_station = 0
    mps_used = set()
    for rp in sol.routes:
        pending: List[Tuple[int, float]] = []
        for i, n in enumerate(rp.nodes):
            if i:
                kmt += graph.c(rp.nodes[i - 1], n)
            charge += rp.tau[i]
            kind = graph.kind[n]
            if kind == "mp":
                mps_used.add(n)
                pending.append((n, rp.B[i] + graph.u[n]))
            elif kind == "station":
                n_station += 1
                wait_sum += rp.W[i]
                for m, dep in pending:
                    k = sum(1 for x in sol.mp_of_request if x == m)
                    ride_sum += k * (rp.A[i] - dep)
                    n_ride += k
                pending = []
    return {
        "vehicles_used": float(sol.n_used()),
        "service_rate": 100.0 * n_served / len(inst.requests) if inst.requests else 0.0,
        "mean_walk_km": walk_km / n_served if n_served else 0.0,
        "mean_in_vehicle_min": ride_sum / n_ride if n_ride else 0.0,
        "mean_station_wait_min": wait_sum / n_station if n_station else 0.0,
        "kmt": kmt,
        "cus_per_kmt": n_served / kmt if kmt > 0 else 0.0,
        "cus_per_mp": n_served / len(mps_used) if mps_used else 0.0,
        "charging_min": charge,
        "served": float(n_served),
        "unserved": float(len(inst.requests) - n_served),
    }


def max_nearest_mp_distance(inst: Instance) -> float:
    """Largest distance from a request origin to its nearest meeting point."""
    return max((min(dist(r.origin, p) for p in inst.meeting_points) for r in inst.requests), default=0.0)
