"""Route evaluation, forward slack, charging scheduling and charger occupancy.

A search-side route is a list of meeting-point and station nodes grouped in
blocks (meeting points of one layer followed by that layer's station), plus
a list of charging visits keyed by the zero-load position they follow
(-1 for the depot, otherwise the index of a station in the sequence).

Waiting is placed at the first meeting point of each block so that the bus
reaches the station no earlier than the start of its window; excess station
waits are therefore zero on every feasible schedule produced here.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .model import EPS, Instance, RoutePlan, StructuralError

DEPOT, MP, STATION, CHARGER = 0, 1, 2, 3
_KIND = {"depot": DEPOT, "mp": MP, "station": STATION, "charger": CHARGER}
BIN_SECONDS = 10.0


@dataclass(frozen=True)
class Charge:
    pos: int        # -1 after the depot, else index of a station in the sequence
    charger: int    # physical charger
    start: float
    duration: float


class Ctx:
    """Flat lookup tables shared by every evaluation in a solve session."""

    def __init__(self, inst: Instance, graph, groups: Dict[int, List[int]]):
        g = graph
        self.inst, self.g = inst, g
        self.tm, self.dm, self.loc = g.tmat, g.dmat, g.loc
        self.kind = [_KIND[k] for k in g.kind]
        self.layer = g.layer_of_node
        self.e, self.l, self.u, self.ride = g.e, g.l, g.u, g.ride_limit
        self.compat = g.compat
        self.station_of_layer = g.station_node_of_layer
        self.T = inst.horizon
        self.depot_end = g.depot_end
        n = g.n_nodes
        self.load = [0] * n
        self.nreq = [0] * n
        self.walk = [0.0] * n
        self.groups = {m: list(rs) for m, rs in groups.items()}
        for m, rs in self.groups.items():
            self.load[m] = sum(inst.requests[r].passengers for r in rs)
            self.nreq[m] = len(rs)
            mp = g.mp_index[m]
            for r in rs:
                self.walk[m] += next(t for j, _, t in inst.requests[r].reachable if j == mp)
        V = inst.vehicles
        self.cap = [v.capacity for v in V]
        self.e_init = [v.e_init for v in V]
        self.e_min = [v.e_min for v in V]
        self.e_max = [v.e_max for v in V]
        self.beta = [v.consumption for v in V]
        self.ch_loc = [g.loc_ch0 + o for o in range(len(inst.chargers))]
        self.ch_rate = [c.rate for c in inst.chargers]
        self.max_events = g.n_charger_copies
        w = inst.weights
        self.l1, self.l2, self.l3, self.omega = w.lambda1, w.lambda2, w.lambda3, w.omega


# ---------------------------------------------------------------- fast time check

def block_spans(ctx: Ctx, seq: Sequence[int]) -> Optional[List[Tuple[int, int]]]:
    """(first index, station index) for each block, or None if malformed."""
    kind, layer, sol = ctx.kind, ctx.layer, ctx.station_of_layer
    out = []
    i, n, prev = 0, len(seq), -1
    while i < n:
        f = seq[i]
        if kind[f] != MP:
            return None
        lay = layer[f]
        if prev >= 0 and (lay <= prev or not ctx.compat[prev][lay]):
            return None
        j = i + 1
        while j < n and kind[seq[j]] == MP:
            if layer[seq[j]] != lay:
                return None
            j += 1
        if j == n or seq[j] != sol[lay]:
            return None
        out.append((i, j))
        prev = lay
        i = j + 1
    return out


def travel_if_feasible(ctx: Ctx, k: int, seq: Sequence[int]) -> Optional[float]:
    """Travel time of a route without charging, or None if time/load/ride infeasible."""
    tm, loc, kind, layer, u, ride, ld = ctx.tm, ctx.loc, ctx.kind, ctx.layer, ctx.u, ctx.ride, ctx.load
    e, l, compat, sol = ctx.e, ctx.l, ctx.compat, ctx.station_of_layer
    cap = ctx.cap[k]
    D = 0.0
    prevloc = 0
    travel = 0.0
    prev_layer = -1
    i, n = 0, len(seq)
    while i < n:
        first = seq[i]
        if kind[first] != MP:
            return None
        lay = layer[first]
        if prev_layer >= 0 and (lay <= prev_layer or not compat[prev_layer][lay]):
            return None
        j = i
        load = 0
        while j < n and kind[seq[j]] == MP:
            if layer[seq[j]] != lay:
                return None
            load += ld[seq[j]]
            j += 1
        if j == n or seq[j] != sol[lay] or load > cap:
            return None
        st = seq[j]
        nxt = loc[st]
        acc = 0.0
        for m_idx in range(j - 1, i - 1, -1):
            m = seq[m_idx]
            lm = loc[m]
            acc += tm[lm][nxt]
            if acc > ride[m] + EPS:
                return None
            nxt = lm
            acc += u[m]
        travel += acc - sum(u[seq[x]] for x in range(i, j))
        X = D + tm[prevloc][loc[first]]
        travel += tm[prevloc][loc[first]]
        start = e[st] - acc
        if X > start:
            start = X
        A = start + acc
        if A > l[st] + EPS:
            return None
        D = A + u[st]
        prevloc = nxt = loc[st]
        prev_layer = lay
        i = j + 1
    back = tm[prevloc][0]
    if n and D + back > ctx.T + EPS:
        return None
    return travel + (back if n else 0.0)


# ---------------------------------------------------------------- full timeline

@dataclass
class Timeline:
    nodes: List[int]        # graph nodes; chargers encoded as -(o + 1)
    seqpos: List[int]       # index into the search sequence (-1 depot, -2 charger, len depot end)
    A: List[float]
    B: List[float]
    D: List[float]
    E: List[float]
    W: List[float]
    q: List[float]
    tau: List[float]
    travel: float
    ctime: float
    wait: float
    time_ok: bool
    energy_ok: bool
    first_low: int          # first index with energy below the minimum, -1 if none
    slackwin: List[float] = field(default_factory=list)

    def cost(self, ctx: Ctx) -> float:
        return ctx.l1 * (self.travel + self.ctime) + ctx.l3 * self.wait


def timeline(ctx: Ctx, k: int, seq: Sequence[int], charges: Sequence[Charge] = ()) -> Optional[Timeline]:
    """Full schedule of a route; None only when the node sequence is malformed."""
    spans = block_spans(ctx, seq)
    if spans is None:
        return None
    tm, dm, loc, u, e, l = ctx.tm, ctx.dm, ctx.loc, ctx.u, ctx.e, ctx.l
    beta, emin, emax = ctx.beta[k], ctx.e_min[k], ctx.e_max[k]
    nodes, seqpos = [0], [-1]
    A, B, D, E, W, q, tau, sw = [0.0], [0.0], [0.0], [ctx.e_init[k]], [0.0], [0.0], [0.0], [0.0]
    time_ok = True
    first_low = -1
    travel = ctime = wait = 0.0
    curD, curE, prevloc = 0.0, ctx.e_init[k], 0
    ch = sorted(charges, key=lambda c: c.pos)
    ci = 0
    cap = ctx.cap[k]

    def note_energy(idx: int, val: float):
        nonlocal first_low
        if first_low < 0 and (val < emin - EPS or val > emax + EPS):
            first_low = idx

    def visit_charges(pos: int):
        nonlocal ci, curD, curE, prevloc, travel, ctime, time_ok
        while ci < len(ch) and ch[ci].pos == pos:
            c = ch[ci]
            cl = ctx.ch_loc[c.charger]
            arr = curD + tm[prevloc][cl]
            ea = curE - beta * dm[prevloc][cl]
            if arr > c.start + EPS:
                time_ok = False
            nodes.append(-(c.charger + 1)); seqpos.append(-2)
            A.append(arr); B.append(c.start); D.append(c.start + c.duration)
            E.append(ea); W.append(max(0.0, c.start - arr)); q.append(0.0); tau.append(c.duration)
            sw.append(0.0)
            note_energy(len(nodes) - 1, ea)
            travel += tm[prevloc][cl]
            ctime += c.duration
            curE = ea + ctx.ch_rate[c.charger] * c.duration
            curD = c.start + c.duration
            prevloc = cl
            ci += 1

    visit_charges(-1)
    for (i, j) in spans:
        st = seq[j]
        dur = 0.0
        nxt = loc[st]
        for m_idx in range(j - 1, i - 1, -1):
            m = seq[m_idx]
            dur += tm[loc[m]][nxt] + u[m]
            nxt = loc[m]
        load = 0.0
        for idx in range(i, j + 1):
            v = seq[idx]
            lv = loc[v]
            t = tm[prevloc][lv]
            arr = curD + t
            travel += t
            curE -= beta * dm[prevloc][lv]
            if idx == i:
                b = max(arr, e[st] - dur, e[v])
            else:
                b = max(arr, e[v])
            nodes.append(v); seqpos.append(idx)
            A.append(arr); B.append(b)
            W.append(b - arr)
            E.append(curE)
            note_energy(len(nodes) - 1, curE)
            tau.append(0.0)
            if b > l[v] + EPS:
                time_ok = False
            sw.append(l[v] - b)
            if v == st:
                wait += b - arr
                load = 0.0
            else:
                load += ctx.load[v]
                if load > cap:
                    time_ok = False
                if b - arr > 0 and idx != i:
                    time_ok = False
            q.append(load)
            curD = b + u[v]
            D.append(curD)
            prevloc = lv
        # ride times within the block
        arr_st = A[-1]
        for back in range(j - i):
            pos = len(nodes) - 2 - back
            m = nodes[pos]
            if arr_st - B[pos] - u[m] > ctx.ride[m] + EPS:
                time_ok = False
        visit_charges(j)
    t = tm[prevloc][0]
    arr = curD + t
    travel += t
    curE -= beta * dm[prevloc][0]
    nodes.append(ctx.depot_end); seqpos.append(len(seq))
    A.append(arr); B.append(arr); D.append(arr); E.append(curE); W.append(0.0); q.append(0.0)
    tau.append(0.0); sw.append(ctx.T - arr)
    note_energy(len(nodes) - 1, curE)
    if arr > ctx.T + EPS:
        time_ok = False
    if ci != len(ch):
        time_ok = False  # charge keyed to a position that is not a zero-load position
    if not seq:
        travel = 0.0
        if ch:
            time_ok = False
    return Timeline(nodes, seqpos, A, B, D, E, W, q, tau, travel, ctime, wait, time_ok,
                    first_low < 0, first_low, sw)


def slack_arrays(tl: Timeline) -> Tuple[List[float], List[float]]:
    """Forward slack F_i (delay allowed at departure of node i) and downstream wait sums."""
    n = len(tl.nodes)
    G = [0.0] * (n + 1)
    G[n] = math.inf
    Wsum = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        G[i] = tl.W[i] + min(tl.slackwin[i], G[i + 1])
        Wsum[i] = Wsum[i + 1] + tl.W[i]
    F = [G[i + 1] for i in range(n)]
    down = [Wsum[i + 1] for i in range(n)]
    return F, down


# ---------------------------------------------------------------- public route state

@dataclass
class RouteState:
    timeline: Timeline
    F: List[float]
    wait_down: List[float]
    horizon: float = math.inf

    @property
    def feasible(self) -> bool:
        return self.timeline.time_ok and self.timeline.energy_ok


def propagate(seq: Sequence[int], k: int, ctx: Ctx, charges: Sequence[Charge] = ()) -> RouteState:
    tl = timeline(ctx, k, seq, charges)
    if tl is None:
        raise StructuralError("malformed route")
    F, down = slack_arrays(tl)
    return RouteState(tl, F, down, ctx.T)


def forward_slack(state: RouteState, i: int, cap: Optional[float] = None) -> float:
    """Allowed delay at node i: min(forward slack, downstream waiting), capped at the horizon."""
    v = min(state.F[i], state.wait_down[i])
    if cap is None:
        cap = state.horizon
    if v > cap:
        v = cap
    return v


# ---------------------------------------------------------------- occupancy grid

class OccupancyGrid:
    """Per-charger bit timeline in 10-second bins over [0, horizon]."""

    def __init__(self, n_chargers: int, horizon: float, bin_seconds: float = BIN_SECONDS):
        self.per_min = 60.0 / bin_seconds
        self.horizon = horizon
        self.nbins = int(math.ceil(horizon * self.per_min - 1e-9)) + 1
        self.rows = [bytearray(self.nbins) for _ in range(n_chargers)]
        self.count = [0] * n_chargers

    def span(self, start: float, end: float) -> Tuple[int, int]:
        if start < -EPS or end > self.horizon + EPS or end < start - EPS:
            raise StructuralError(f"charging event [{start}, {end}) outside horizon")
        a = start * self.per_min
        b = end * self.per_min
        ra, rb = round(a), round(b)
        if abs(a - ra) < 1e-6:
            a = ra
        if abs(b - rb) < 1e-6:
            b = rb
        lo = max(0, int(math.floor(a)))
        hi = min(self.nbins, int(math.ceil(b)))
        return lo, hi

    def is_free(self, o: int, start: float, end: float) -> bool:
        lo, hi = self.span(start, end)
        row = self.rows[o]
        return not any(row[lo:hi])

    def occupy(self, o: int, start: float, end: float) -> bool:
        """Mark the bins; returns False (and marks nothing) on conflict."""
        lo, hi = self.span(start, end)
        row = self.rows[o]
        if any(row[lo:hi]):
            return False
        row[lo:hi] = b"\x01" * (hi - lo)
        self.count[o] += 1
        return True

    def release(self, o: int, start: float, end: float):
        lo, hi = self.span(start, end)
        self.rows[o][lo:hi] = bytes(hi - lo)
        self.count[o] -= 1

    def first_free(self, o: int, lo_t: float, hi_t: float, dur: float) -> Optional[float]:
        """Earliest start in [lo_t, hi_t] whose event of length dur is conflict-free."""
        s = lo_t
        row = self.rows[o]
        while s <= hi_t + 1e-9:
            lo, hi = self.span(s, min(s + dur, self.horizon))
            blocked = row.find(1, lo, hi) if hi > lo else -1
            if blocked < 0:
                return s
            nxt = row.find(0, blocked, self.nbins)
            if nxt < 0:
                return None
            s = nxt / self.per_min
        return None

    def free_run(self, o: int, start: float, limit: float) -> float:
        """Longest conflict-free duration starting at start, at most limit."""
        lo, _ = self.span(start, start)
        row = self.rows[o]
        if lo < self.nbins and row[lo]:
            return 0.0
        nxt = row.find(1, lo, self.nbins)
        if nxt < 0:
            return limit
        return max(0.0, min(limit, nxt / self.per_min - start))


def conflict_check(events: Iterable[Tuple[int, float, float]], grid: Optional[OccupancyGrid] = None,
                   n_chargers: int = 0, horizon: float = 0.0, max_events: Optional[int] = None) -> bool:
    """True iff no two (charger, start, end) events share a bin on the same charger.

    The grid is rebuilt from the given events. ``max_events`` bounds the number
    of visits per physical charger (its number of dummy copies).
    """
    if grid is None:
        grid = OccupancyGrid(n_chargers, horizon)
    else:
        grid = OccupancyGrid(len(grid.rows), grid.horizon, 60.0 / grid.per_min)
    for o, s, e in events:
        if not grid.occupy(o, s, e):
            return False
        if max_events is not None and grid.count[o] > max_events:
            return False
    return True


def exact_overlap(events: Sequence[Tuple[int, float, float]]) -> bool:
    """True iff some pair of half-open intervals on one charger intersects."""
    by: Dict[int, List[Tuple[float, float]]] = {}
    for o, s, e in events:
        if e > s:
            by.setdefault(o, []).append((s, e))
    for evs in by.values():
        evs.sort()
        for a, b in zip(evs, evs[1:]):
            if b[0] < a[1]:
                return True
    return False


# ---------------------------------------------------------------- charging scheduling

@dataclass
class ChargingPlan:
    success: bool
    charges: List[Charge]
    repaired: bool = False

    def energy(self, ctx: Ctx) -> List[float]:
        return [ctx.ch_rate[c.charger] * c.duration for c in self.charges]


def schedule_charging(ctx: Ctx, k: int, seq: Sequence[int], rng: Optional[random.Random] = None,
                      greedy: bool = False, grid: Optional[OccupancyGrid] = None) -> ChargingPlan:
    """Insert charging visits so that energy never falls below the minimum.

    Random variant: the first visit goes to a random candidate position, the
    start time is drawn in the residual slack, and later visits follow at the
    next positions. On failure one sequential repair pass restarts from the
    depot. Greedy variant: positions in order and earliest conflict-free starts
    against ``grid``.
    """
    base = timeline(ctx, k, seq, ())
    if base is None or not base.time_ok:
        return ChargingPlan(False, [])
    if base.energy_ok:
        return ChargingPlan(True, [])
    if not seq:
        return ChargingPlan(False, [])
    stations = {ctx.station_of_layer[ctx.layer[v]] for v in seq if ctx.kind[v] == MP}
    zero_pos = [-1] + [i for i, v in enumerate(seq) if v in stations and ctx.kind[v] == STATION]
    if greedy or rng is None:
        plan = _attempt(ctx, k, seq, zero_pos, None, grid)
        if plan is not None:
            return ChargingPlan(True, plan)
        return ChargingPlan(False, [], True)
    plan = _attempt(ctx, k, seq, zero_pos, rng, grid)
    if plan is not None:
        return ChargingPlan(True, plan)
    plan = _attempt(ctx, k, seq, zero_pos, None, grid, jitter=rng)
    if plan is not None:
        return ChargingPlan(True, plan, True)
    return ChargingPlan(False, [], True)


def _attempt(ctx: Ctx, k: int, seq: Sequence[int], zero_pos: List[int], rng: Optional[random.Random],
             grid: Optional[OccupancyGrid], jitter: Optional[random.Random] = None) -> Optional[List[Charge]]:
    charges: List[Charge] = []
    used = set()
    last = None
    tm, dm = ctx.tm, ctx.dm
    beta, emin, emax = ctx.beta[k], ctx.e_min[k], ctx.e_max[k]
    n_seq = len(seq)
    while True:
        tl = timeline(ctx, k, seq, charges)
        if tl is None or not tl.time_ok:
            return None
        if tl.energy_ok:
            return charges
        bad = tl.first_low
        if tl.E[bad] > emax + EPS:
            return None
        # timeline index of each zero-load position
        idx_of = {}
        for i, sp in enumerate(tl.seqpos):
            if sp == -1:
                idx_of[-1] = i
            elif sp >= 0 and sp in zero_pos:
                idx_of[sp] = i
        cands = [p for p in zero_pos if p not in used and idx_of[p] < bad]
        if last is not None:
            cands = [p for p in cands if p > last]
        if not cands:
            return None
        if rng is not None and last is None:
            p = rng.choice(cands)
        else:
            p = cands[0]
        used.add(p)
        last = p
        ip = idx_of[p]
        prev_loc = ctx.loc[tl.nodes[ip]] if tl.nodes[ip] >= 0 else None
        nxt_node = seq[p + 1] if p + 1 < n_seq else ctx.depot_end
        nxt_loc = ctx.loc[nxt_node]
        F, down = slack_arrays(tl)
        delay = min(F[ip], down[ip])
        Dp = tl.D[ip]
        Ep = tl.E[ip]
        # minimum downstream energy without a new visit
        tail_min = min(tl.E[ip + 1:])
        tail_room = min(emax - x for x in tl.E[ip + 1:])
        best = None
        for o, cl in enumerate(ctx.ch_loc):
            detour_km = dm[prev_loc][cl] + dm[cl][nxt_loc] - dm[prev_loc][nxt_loc]
            Es = Ep - beta * dm[prev_loc][cl]
            if Es < emin - EPS:
                continue
            need = emin - (tail_min - beta * detour_km)
            if need <= EPS:
                need = 0.0
            room = min(emax - Es, tail_room + beta * detour_km)
            if room <= EPS:
                continue
            amount = min(need, room)
            if amount <= 0:
                continue
            access = tm[prev_loc][cl] + tm[cl][nxt_loc] - tm[prev_loc][nxt_loc]
            op = access + amount / ctx.ch_rate[o]
            key = (op, o)
            if best is None or key < best[0]:
                best = (key, o, cl, amount, access)
        if best is None:
            continue
        _, o, cl, amount, access = best
        rate = ctx.ch_rate[o]
        full = amount / rate
        earliest = Dp + tm[prev_loc][cl]
        if full + access <= delay + EPS:
            extra = max(0.0, delay - full - access)
            if grid is not None:
                s = grid.first_free(o, earliest, earliest + extra, full)
                if s is None:
                    s2 = _partial_with_grid(grid, o, earliest, delay - access)
                    if s2 is None:
                        continue
                    charges.append(Charge(p, o, s2[0], s2[1]))
                    continue
            elif rng is not None:
                s = earliest + rng.uniform(0.0, extra)
            elif jitter is not None:
                s = earliest + jitter.uniform(0.0, extra)
            else:
                s = earliest
            charges.append(Charge(p, o, s, full))
        else:
            avail = delay - access
            if avail <= EPS:
                continue
            if grid is not None:
                s2 = _partial_with_grid(grid, o, earliest, avail)
                if s2 is None:
                    continue
                charges.append(Charge(p, o, s2[0], s2[1]))
            else:
                charges.append(Charge(p, o, earliest, min(avail, full)))


def _partial_with_grid(grid: OccupancyGrid, o: int, earliest: float, avail: float) -> Optional[Tuple[float, float]]:
    s = grid.first_free(o, earliest, earliest + avail, 1e-9)
    if s is None:
        return None
    run = grid.free_run(o, s, avail - (s - earliest))
    if run <= EPS:
        return None
    return s, run


# ---------------------------------------------------------------- conversion

def route_plan(ctx: Ctx, k: int, tl: Timeline, dummy_of: Dict[Tuple[int, int], int]) -> RoutePlan:
    """Turn a timeline into a model RoutePlan; dummy_of maps (charger, timeline index) to node ids."""
    nodes = []
    for i, v in enumerate(tl.nodes):
        if v < 0:
            nodes.append(dummy_of[(k, i)])
        else:
            nodes.append(v)
    W = [tl.W[i] if v >= 0 and ctx.kind[v] == STATION else 0.0 for i, v in enumerate(tl.nodes)]
    return RoutePlan(k, nodes, list(tl.A), list(tl.B), W, list(tl.q), list(tl.E), list(tl.tau))
