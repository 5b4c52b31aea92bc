"""Deterministic-annealing (threshold accepting) metaheuristic for routing and charging.

Routing customers are meeting-point dummy nodes carrying the requests
assigned to them. A route is a list of blocks in increasing layer order;
each block holds the meeting points of one layer followed by that layer's
station. Moves are screened on travel time with block-local schedule
checks; charging is replanned for every route a move touches.
"""

from __future__ import annotations

import bisect
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .evalsched import (MP, STATION, Charge, Ctx, OccupancyGrid, conflict_check, route_plan,
                        schedule_charging, timeline)
from .model import EPS, Solution, objective as model_objective

INF = float("inf")


@dataclass
class DAParams:
    t_max: float = 2.1
    t_red: int = 200
    n_imp: int = 100
    iter_max: int = 100_000
    n_stagnant: int = 200
    n_max: int = 60
    delta: float = 0.275
    p_worst: float = 3.0
    p_dist: float = 6.0
    p_tw: float = 6.0
    p_shaw: float = 6.0
    shaw: Tuple[float, float, float] = (9.0, 3.0, 2.0)
    init_tries: int = 100
    init_tries_retry: int = 1000
    index_mode: str = "list"         # "list": floor(y^p * |list|); "printed": floor(y^p * n_remove)
    time_limit: Optional[float] = None

    def __post_init__(self):
        vals = (self.t_max, self.t_red, self.n_imp, self.n_max, self.delta, self.p_worst, self.p_dist,
                self.p_tw, self.p_shaw, self.init_tries, self.init_tries_retry)
        if min(vals) <= 0 or self.iter_max < 0 or self.n_stagnant <= 0:
            raise ValueError("metaheuristic parameters must be positive")
        if self.index_mode not in ("list", "printed"):
            raise ValueError("index_mode must be 'list' or 'printed'")


def select_index(y: float, p: float, n: int) -> int:
    """1-based position picked from a sorted list of length n (randomised greedy)."""
    return max(1, int(math.floor((y ** p) * n)))


# ---------------------------------------------------------------- route records

class Route:
    """Immutable route with its charge-free block schedule and charging plan."""

    __slots__ = ("k", "seq", "charges", "travel", "cost", "ctime", "blocks", "blayer", "X", "start",
                 "Ast", "D", "dur", "load", "fafter", "fblock", "end")

    def used(self) -> bool:
        return bool(self.seq)


def analyze(ctx: Ctx, k: int, seq: List[int]) -> Optional[Route]:
    """Charge-free schedule with per-block slack; None if time, load or ride infeasible."""
    tm, loc, kind, layer, u, ride, ld = ctx.tm, ctx.loc, ctx.kind, ctx.layer, ctx.u, ctx.ride, ctx.load
    e, l, compat, sol = ctx.e, ctx.l, ctx.compat, ctx.station_of_layer
    cap = ctx.cap[k]
    R = Route()
    R.k, R.seq = k, seq
    blocks, blayer, X, start, Ast, D, dur, load = [], [], [], [], [], [], [], []
    Dcur, prevloc, travel, prev_layer = 0.0, 0, 0.0, -1
    i, n = 0, len(seq)
    while i < n:
        first = seq[i]
        if kind[first] != MP:
            return None
        lay = layer[first]
        if prev_layer >= 0 and (lay <= prev_layer or not compat[prev_layer][lay]):
            return None
        j = i
        bl = 0
        while j < n and kind[seq[j]] == MP:
            if layer[seq[j]] != lay:
                return None
            bl += ld[seq[j]]
            j += 1
        if j == n or seq[j] != sol[lay] or bl > cap:
            return None
        nxt = loc[seq[j]]
        acc = 0.0
        inner = 0.0
        for x in range(j - 1, i - 1, -1):
            m = seq[x]
            lm = loc[m]
            tt = tm[lm][nxt]
            acc += tt
            inner += tt
            if acc > ride[m] + EPS:
                return None
            nxt = lm
            acc += u[m]
        st = seq[j]
        t0 = tm[prevloc][loc[first]]
        x_arr = Dcur + t0
        s = e[st] - acc
        if x_arr > s:
            s = x_arr
        a = s + acc
        if a > l[st] + EPS:
            return None
        travel += t0 + inner
        Dcur = a + u[st]
        blocks.append((i, j)); blayer.append(lay); X.append(x_arr); start.append(s); Ast.append(a)
        D.append(Dcur); dur.append(acc); load.append(bl)
        prevloc = loc[st]
        prev_layer = lay
        i = j + 1
    if n:
        back = tm[prevloc][0]
        end = Dcur + back
        if end > ctx.T + EPS:
            return None
        travel += back
    else:
        end = 0.0
    nb = len(blocks)
    fafter = [0.0] * nb
    fblock = [0.0] * nb
    nxt_f = ctx.T - end
    for b in range(nb - 1, -1, -1):
        fafter[b] = nxt_f
        fblock[b] = min(l[seq[blocks[b][1]]] - Ast[b], fafter[b])
        nxt_f = (start[b] - X[b]) + fblock[b]
    R.blocks, R.blayer, R.X, R.start, R.Ast, R.D, R.dur, R.load = blocks, blayer, X, start, Ast, D, dur, load
    R.fafter, R.fblock, R.end = fafter, fblock, end
    R.travel = travel
    R.charges = []
    R.ctime = 0.0
    R.cost = ctx.l1 * travel
    return R


def finish_route(ctx: Ctx, R: Route, rng: Optional[random.Random], grid: Optional[OccupancyGrid] = None,
                 greedy: bool = False) -> Optional[Route]:
    """Attach a greedy charging plan; None if the energy deficit cannot be covered."""
    if not R.seq:
        tl = timeline(ctx, R.k, R.seq, ())
        return R if tl.energy_ok else None
    plan = schedule_charging(ctx, R.k, R.seq, rng=None if greedy else rng, greedy=greedy, grid=grid)
    if not plan.success:
        return None
    if plan.charges:
        tl = timeline(ctx, R.k, R.seq, plan.charges)
        if tl is None or not tl.time_ok or not tl.energy_ok:
            return None
        R.charges = plan.charges
        R.ctime = tl.ctime
        R.cost = tl.cost(ctx)
    return R


def build_route(ctx: Ctx, k: int, seq: List[int], rng: Optional[random.Random],
                grid: Optional[OccupancyGrid] = None, greedy: bool = False) -> Optional[Route]:
    R = analyze(ctx, k, seq)
    if R is None:
        return None
    return finish_route(ctx, R, rng, grid, greedy)


def charge_time_with_access(ctx: Ctx, R: Route) -> float:
    """Total charging time plus the extra driving needed to reach chargers."""
    if not R.charges:
        return 0.0
    return R.ctime + (R.cost / ctx.l1 - R.ctime - R.travel if ctx.l1 > 0 else 0.0)


# ---------------------------------------------------------------- block-local evaluation

def _block_times(ctx: Ctx, mps: Sequence[int], st: int) -> Optional[Tuple[float, float]]:
    """(duration from first pickup to station arrival, inner travel) or None on ride violation."""
    tm, loc, u, ride = ctx.tm, ctx.loc, ctx.u, ctx.ride
    nxt = loc[st]
    acc = inner = 0.0
    for x in range(len(mps) - 1, -1, -1):
        m = mps[x]
        lm = loc[m]
        tt = tm[lm][nxt]
        acc += tt
        inner += tt
        if acc > ride[m] + EPS:
            return None
        nxt = lm
        acc += u[m]
    return acc, inner


def replace_block(ctx: Ctx, R: Route, b: int, mps: Sequence[int]) -> Optional[float]:
    """Travel change when block b's meeting points become ``mps`` (non-empty); None if infeasible."""
    i, j = R.blocks[b]
    seq = R.seq
    st = seq[j]
    load = 0
    for m in mps:
        load += ctx.load[m]
    if load > ctx.cap[R.k]:
        return None
    bt = _block_times(ctx, mps, st)
    if bt is None:
        return None
    dur, inner = bt
    tm, loc = ctx.tm, ctx.loc
    prevloc = loc[seq[i - 1]] if i > 0 else 0
    dprev = R.D[b - 1] if b > 0 else 0.0
    x_arr = dprev + tm[prevloc][loc[mps[0]]]
    s = ctx.e[st] - dur
    if x_arr > s:
        s = x_arr
    a = s + dur
    if a > ctx.l[st] + EPS:
        return None
    if a + ctx.u[st] - R.D[b] > R.fafter[b] + EPS:
        return None
    old_inner = 0.0
    for x in range(i, j):
        old_inner += tm[loc[seq[x]]][loc[seq[x + 1]]]
    return (tm[prevloc][loc[mps[0]]] + inner) - (tm[prevloc][loc[seq[i]]] + old_inner)


def remove_block_delta(ctx: Ctx, R: Route, b: int) -> float:
    """Travel change when block b is dropped entirely (always feasible)."""
    i, j = R.blocks[b]
    seq, tm, loc = R.seq, ctx.tm, ctx.loc
    prevloc = loc[seq[i - 1]] if i > 0 else 0
    nextloc = loc[seq[j + 1]] if j + 1 < len(seq) else 0
    old = tm[prevloc][loc[seq[i]]]
    for x in range(i, j):
        old += tm[loc[seq[x]]][loc[seq[x + 1]]]
    old += tm[loc[seq[j]]][nextloc]
    if not R.blocks or (len(R.blocks) == 1):
        return -R.travel
    return tm[prevloc][nextloc] - old


def new_block_delta(ctx: Ctx, R: Route, slot: int, mps: Sequence[int]) -> Optional[float]:
    """Travel change when a block of ``mps`` is inserted before block ``slot``."""
    lay = ctx.layer[mps[0]]
    st = ctx.station_of_layer[lay]
    compat = ctx.compat
    nb = len(R.blocks)
    if slot > 0 and (R.blayer[slot - 1] >= lay or not compat[R.blayer[slot - 1]][lay]):
        return None
    if slot < nb and (R.blayer[slot] <= lay or not compat[lay][R.blayer[slot]]):
        return None
    load = 0
    for m in mps:
        load += ctx.load[m]
    if load > ctx.cap[R.k]:
        return None
    bt = _block_times(ctx, mps, st)
    if bt is None:
        return None
    dur, inner = bt
    tm, loc, seq = ctx.tm, ctx.loc, R.seq
    prevloc = loc[seq[R.blocks[slot - 1][1]]] if slot > 0 else 0
    dprev = R.D[slot - 1] if slot > 0 else 0.0
    x_arr = dprev + tm[prevloc][loc[mps[0]]]
    s = ctx.e[st] - dur
    if x_arr > s:
        s = x_arr
    a = s + dur
    if a > ctx.l[st] + EPS:
        return None
    dnew = a + ctx.u[st]
    sl = loc[st]
    if slot < nb:
        f = seq[R.blocks[slot][0]]
        xb = dnew + tm[sl][loc[f]]
        sb = ctx.e[seq[R.blocks[slot][1]]] - R.dur[slot]
        if xb > sb:
            sb = xb
        if sb - R.start[slot] > R.fblock[slot] + EPS:
            return None
        nextloc = loc[f]
    else:
        if dnew + tm[sl][0] > ctx.T + EPS:
            return None
        nextloc = 0
    if not seq:
        return tm[0][loc[mps[0]]] + inner + tm[sl][0]
    return tm[prevloc][loc[mps[0]]] + inner + tm[sl][nextloc] - tm[prevloc][nextloc]


def block_of_layer(R: Route, lay: int) -> Tuple[int, bool]:
    """(index, found): the block serving ``lay`` or the sorted slot for a new one."""
    b = bisect.bisect_left(R.blayer, lay)
    return b, (b < len(R.blayer) and R.blayer[b] == lay)


def insertion_options(ctx: Ctx, R: Route, m: int) -> List[Tuple[float, int, int]]:
    """Feasible (travel delta, kind, index) for placing customer m on route R.

    kind 0: inside existing block at MP position index; kind 1: new block at slot index.
    """
    lay = ctx.layer[m]
    b, found = block_of_layer(R, lay)
    out = []
    if found:
        i, j = R.blocks[b]
        base = R.seq[i:j]
        for p in range(len(base) + 1):
            mps = base[:p] + [m] + base[p:]
            d = replace_block(ctx, R, b, mps)
            if d is not None:
                out.append((d, 0, i + p))
    else:
        d = new_block_delta(ctx, R, b, [m])
        if d is not None:
            out.append((d, 1, b))
    return out


def apply_insertion(R: Route, m: int, kind: int, idx: int, ctx: Ctx) -> List[int]:
    seq = list(R.seq)
    if kind == 0:
        seq.insert(idx, m)
    else:
        pos = R.blocks[idx][0] if idx < len(R.blocks) else len(seq)
        seq[pos:pos] = [m, ctx.station_of_layer[ctx.layer[m]]]
    return seq


def remove_customer(ctx: Ctx, R: Route, m: int) -> Tuple[List[int], float]:
    """New sequence and travel change after removing customer m from route R."""
    seq = R.seq
    p = seq.index(m)
    b, _ = block_of_layer(R, ctx.layer[m])
    i, j = R.blocks[b]
    if j - i == 1:
        d = remove_block_delta(ctx, R, b)
        return seq[:i] + seq[j + 1:], d
    tm, loc = ctx.tm, ctx.loc
    prevloc = loc[seq[p - 1]] if p > 0 else 0
    nxt = loc[seq[p + 1]]
    d = tm[prevloc][nxt] - tm[prevloc][loc[m]] - tm[loc[m]][nxt]
    return seq[:p] + seq[p + 1:], d


# ---------------------------------------------------------------- solution state

class State:
    __slots__ = ("routes", "pool", "where", "cost")

    def copy(self) -> "State":
        s = State()
        s.routes = list(self.routes)
        s.pool = list(self.pool)
        s.where = dict(self.where)
        s.cost = self.cost
        return s

    def n_used(self) -> int:
        return sum(1 for R in self.routes if R.seq)


class Search:
    """Shared context of one metaheuristic session."""

    def __init__(self, inst, graph, assignment, params: Optional[DAParams] = None,
                 rng: Optional[random.Random] = None):
        self.inst, self.g = inst, graph
        self.assignment = assignment
        self.p = params or DAParams()
        self.rng = rng or random.Random(0)
        groups = assignment.groups()
        self.ctx = Ctx(inst, graph, groups)
        c = self.ctx
        self.customers = sorted(groups)
        self.gain = {m: c.omega * c.nreq[m] - c.l2 * c.walk[m] for m in self.customers}
        self.const = c.omega * len(inst.requests)
        self.K = len(inst.vehicles)
        # empty vehicles that are interchangeable share one representative
        self.vkey = [(v.capacity, v.battery, v.e_init, v.e_min, v.e_max, v.consumption) for v in inst.vehicles]
        self._norm()
        self.t_allbus = self._mean_travel()
        self.t_max = self.p.t_max * self.t_allbus
        self.trace: List[Tuple[int, float, float, int]] = []

    # -------------------------------------------------------- helpers
    def _norm(self):
        c = self.ctx
        locs = sorted({c.loc[m] for m in self.customers} | {c.loc[c.station_of_layer[c.layer[m]]] for m in self.customers})
        tmax = max((c.tm[a][b] for a in locs for b in locs), default=0.0)
        self.tmax_norm = tmax if tmax > 0 else 1.0
        self.gmax = max((c.load[m] for m in self.customers), default=1) or 1

    def _mean_travel(self) -> float:
        c = self.ctx
        nodes = self.customers + sorted({c.station_of_layer[c.layer[m]] for m in self.customers})
        if len(nodes) < 2:
            return 1.0
        tot, cnt = 0.0, 0
        for a in nodes:
            ra = c.tm[c.loc[a]]
            for b in nodes:
                if a != b:
                    tot += ra[c.loc[b]]
                    cnt += 1
        return tot / cnt if cnt else 1.0

    def relatedness(self, i: int, j: int) -> Tuple[float, float, float]:
        c = self.ctx
        si, sj = c.station_of_layer[c.layer[i]], c.station_of_layer[c.layer[j]]
        tn = self.tmax_norm
        r_dist = c.tm[c.loc[i]][c.loc[j]] / tn + c.tm[c.loc[si]][c.loc[sj]] / tn
        T = c.T
        r_tw = abs(c.l[i] - c.l[j]) / T + abs(c.l[si] - c.l[sj]) / T
        phi, chi, psi = self.p.shaw
        r_shaw = phi * r_dist + chi * r_tw + psi * abs(c.load[i] - c.load[j]) / self.gmax
        return r_dist, r_tw, r_shaw

    def total(self, s: State) -> float:
        v = self.const
        for R in s.routes:
            v += R.cost
        for m in s.where:
            v -= self.gain[m]
        return v

    def empty_state(self) -> State:
        s = State()
        s.routes = [analyze(self.ctx, k, []) for k in range(self.K)]
        s.pool = list(self.customers)
        s.where = {}
        s.cost = self.total(s)
        return s

    def set_route(self, s: State, R: Route):
        old = s.routes[R.k]
        for m in old.seq:
            if self.ctx.kind[m] == MP and s.where.get(m) == R.k:
                del s.where[m]
        s.routes[R.k] = R
        for m in R.seq:
            if self.ctx.kind[m] == MP:
                s.where[m] = R.k

    def refresh(self, s: State):
        s.pool = [m for m in self.customers if m not in s.where]
        s.cost = self.total(s)

    def events(self, s: State, skip: Sequence[int] = ()) -> List[Tuple[int, float, float]]:
        out = []
        for R in s.routes:
            if R.k in skip:
                continue
            for ch in R.charges:
                out.append((ch.charger, ch.start, ch.start + ch.duration))
        return out

    def no_conflict(self, s: State) -> bool:
        ev = self.events(s)
        if not ev:
            return True
        return conflict_check(ev, n_chargers=len(self.inst.chargers), horizon=self.ctx.T,
                              max_events=self.ctx.max_events)

    def grid_without(self, s: State, skip: Sequence[int]) -> OccupancyGrid:
        grid = OccupancyGrid(len(self.inst.chargers), self.ctx.T)
        for o, a, b in self.events(s, skip):
            grid.occupy(o, a, b)
        return grid

    def candidate_vehicles(self, s: State) -> List[int]:
        """Used vehicles plus one representative of each distinct idle vehicle type."""
        out, seen = [], set()
        for R in s.routes:
            if R.seq:
                out.append(R.k)
            elif self.vkey[R.k] not in seen:
                seen.add(self.vkey[R.k])
                out.append(R.k)
        return out

    # -------------------------------------------------------- insertion
    def best_insertions(self, s: State, m: int, vehicles: Optional[Sequence[int]] = None
                        ) -> List[Tuple[float, int, int, int]]:
        """All feasible (cost delta, vehicle, kind, index) sorted by cost."""
        out = []
        l1 = self.ctx.l1
        for k in (vehicles if vehicles is not None else self.candidate_vehicles(s)):
            for d, kind, idx in insertion_options(self.ctx, s.routes[k], m):
                out.append((l1 * d, k, kind, idx))
        out.sort()
        return out

    def try_insert(self, s: State, m: int, options, grid_check: bool = False, limit: int = 4) -> bool:
        """Insert m at the cheapest option whose charging plan succeeds (mutates s)."""
        tried = 0
        for d, k, kind, idx in options:
            if tried >= limit:
                break
            tried += 1
            R = s.routes[k]
            seq = apply_insertion(R, m, kind, idx, self.ctx)
            grid = self.grid_without(s, (k,)) if grid_check else None
            NR = build_route(self.ctx, k, seq, self.rng, grid=grid, greedy=grid_check)
            if NR is None:
                continue
            self.set_route(s, NR)
            return True
        return False

    def greedy_fill(self, s: State, order: Sequence[int], grid_check: bool = False) -> State:
        for m in order:
            opts = self.best_insertions(s, m)
            self.try_insert(s, m, opts, grid_check=grid_check)
        self.refresh(s)
        return s

    # -------------------------------------------------------- initial solution
    def initial_solution(self) -> State:
        best = None
        for tries in (self.p.init_tries, self.p.init_tries_retry):
            for _ in range(tries):
                order = list(self.customers)
                self.rng.shuffle(order)
                s = self.greedy_fill(self.empty_state(), order, grid_check=True)
                if not self.no_conflict(s):
                    continue
                if best is None or s.cost < best.cost - 1e-9:
                    best = s
                if not s.pool:
                    # every customer routed: further random orders only reshuffle travel
                    pass
            if best is not None:
                break
        if best is None:
            best = self.empty_state()
        return best

    # -------------------------------------------------------- operator helpers
    def removal_cost(self, s: State, m: int) -> float:
        """Cost of customer m in s: travel saved by removing it minus its served gain."""
        R = s.routes[s.where[m]]
        _, d = remove_customer(self.ctx, R, m)
        return -self.ctx.l1 * d - self.gain[m]

    def detach(self, s: State, m: int) -> bool:
        """Remove customer m from its route (charging replanned); False if that fails."""
        k = s.where[m]
        R = s.routes[k]
        seq, _ = remove_customer(self.ctx, R, m)
        NR = build_route(self.ctx, k, seq, self.rng)
        if NR is None:
            return False
        self.set_route(s, NR)
        return True

    def served(self, s: State) -> List[int]:
        return [m for m in self.customers if m in s.where]

    # -------------------------------------------------------- operators
    def op_relocate(self, s: State) -> State:
        srv = self.served(s)
        if not srv:
            return s
        t = s.copy()
        if self.rng.random() < 0.5:
            m = self.rng.choice(srv)
        else:
            used = [R.k for R in s.routes if R.seq]
            k = self.rng.choice(used)
            cands = [x for x in s.routes[k].seq if self.ctx.kind[x] == MP]
            m = max(cands, key=lambda x: (self.removal_cost(s, x), -x))
        if not self.detach(t, m):
            return s
        opts = self.best_insertions(t, m)
        if not self.try_insert(t, m, opts):
            return s
        self.refresh(t)
        return t

    def n_remove(self) -> int:
        hi = max(1, min(self.p.n_max, int(math.floor(self.p.delta * len(self.customers)))))
        return self.rng.randint(1, hi)

    def _pick(self, ranked: List[int], p: float, n_rem: int) -> int:
        y = self.rng.random()
        n = len(ranked) if self.p.index_mode == "list" else n_rem
        j = min(select_index(y, p, n), len(ranked))
        return ranked[j - 1]

    def op_destroy_repair(self, s: State) -> State:
        srv = self.served(s)
        if not srv and not s.pool:
            return s
        t = s.copy()
        n_rem = min(self.n_remove(), len(srv))
        how = self.rng.randrange(5)
        removed: List[int] = []
        if how == 0:
            removed = self.rng.sample(srv, n_rem)
            for m in removed:
                if not self.detach(t, m):
                    return s
        elif how == 1:
            for _ in range(n_rem):
                cur = self.served(t)
                if not cur:
                    break
                ranked = sorted(cur, key=lambda x: (-self.removal_cost(t, x), x))
                m = self._pick(ranked, self.p.p_worst, n_rem)
                if not self.detach(t, m):
                    return s
                removed.append(m)
        elif n_rem > 0:
            idx = how - 2  # 0 distance, 1 time window, 2 Shaw
            p = (self.p.p_dist, self.p.p_tw, self.p.p_shaw)[idx]
            first = self.rng.choice(srv)
            if not self.detach(t, first):
                return s
            removed.append(first)
            pool = list(t.pool) + [first]
            for _ in range(n_rem - 1):
                cur = self.served(t)
                if not cur:
                    break
                seed = self.rng.choice(pool)
                ranked = sorted(cur, key=lambda x: (self.relatedness(seed, x)[idx], x))
                m = self._pick(ranked, p, n_rem)
                if not self.detach(t, m):
                    return s
                removed.append(m)
                pool.append(m)
        self.refresh(t)
        pool = list(t.pool)
        if self.rng.random() < 0.5:
            self.repair_greedy(t, pool)
        else:
            self.repair_regret(t, pool, self.rng.choice((2, 3)))
        self.refresh(t)
        return t

    def repair_greedy(self, s: State, pool: List[int]):
        self._repair(s, pool, 1)

    def repair_regret(self, s: State, pool: List[int], kreg: int):
        self._repair(s, pool, kreg)

    def _repair(self, s: State, pool: List[int], kreg: int):
        """Cheapest-first (kreg=1) or regret-k insertion with per-route caching."""
        left = list(pool)
        cache: Dict[Tuple[int, int], List[Tuple[float, int, int]]] = {}
        l1 = self.ctx.l1
        banned = set()
        while left:
            vehicles = self.candidate_vehicles(s)
            best = None
            for m in left:
                per_route = []
                for k in vehicles:
                    key = (m, k)
                    if key not in cache:
                        opts = insertion_options(self.ctx, s.routes[k], m)
                        cache[key] = sorted((l1 * d, kind, idx) for d, kind, idx in opts)
                    if (m, k) in banned:
                        continue
                    if cache[key]:
                        c0 = cache[key][0]
                        per_route.append((c0[0], k, c0[1], c0[2]))
                if not per_route:
                    continue
                per_route.sort()
                if kreg == 1:
                    score = per_route[0][0]
                else:
                    reg = 0.0
                    for x in range(1, kreg):
                        other = per_route[x][0] if x < len(per_route) else INF
                        reg += other - per_route[0][0]
                    score = -reg
                key2 = (score, per_route[0][0], m)
                if best is None or key2 < best[0]:
                    best = (key2, m, per_route[0])
            if best is None:
                break
            _, m, (d, k, kind, idx) = best
            seq = apply_insertion(s.routes[k], m, kind, idx, self.ctx)
            NR = build_route(self.ctx, k, seq, self.rng)
            if NR is None:
                banned.add((m, k))
                continue
            self.set_route(s, NR)
            left.remove(m)
            for key in [key for key in cache if key[1] == k]:
                del cache[key]

    def op_two_opt_star(self, s: State) -> State:
        used = [R.k for R in s.routes if R.seq]
        if len(used) < 2:
            return s
        k1, k2 = self.rng.sample(used, 2)
        R1, R2 = s.routes[k1], s.routes[k2]
        cuts1 = [R1.blocks[b][0] for b in range(len(R1.blocks))] + [len(R1.seq)]
        cuts2 = [R2.blocks[b][0] for b in range(len(R2.blocks))] + [len(R2.seq)]
        best = None
        for c1 in cuts1:
            for c2 in cuts2:
                if (c1 == 0 and c2 == 0) or (c1 == len(R1.seq) and c2 == len(R2.seq)):
                    continue
                n1 = R1.seq[:c1] + R2.seq[c2:]
                n2 = R2.seq[:c2] + R1.seq[c1:]
                if n1 == R1.seq:
                    continue
                A1 = analyze(self.ctx, k1, n1)
                if A1 is None:
                    continue
                A2 = analyze(self.ctx, k2, n2)
                if A2 is None:
                    continue
                d = A1.travel + A2.travel - R1.travel - R2.travel
                if best is None or d < best[0] - 1e-12:
                    best = (d, A1, A2)
        if best is None:
            return s
        return self._commit(s, [best[1], best[2]])

    def _commit(self, s: State, analyzed: List[Route]) -> State:
        t = s.copy()
        for A in analyzed:
            NR = finish_route(self.ctx, A, self.rng)
            if NR is None:
                return s
            self.set_route(t, NR)
        self.refresh(t)
        return t

    def _best_block_perm(self, R: Route, perms: Callable[[List[int]], List[List[int]]]) -> Optional[List[int]]:
        best = None
        for b, (i, j) in enumerate(R.blocks):
            mps = R.seq[i:j]
            for cand in perms(mps):
                d = replace_block(self.ctx, R, b, cand)
                if d is not None and d < -1e-9 and (best is None or d < best[0]):
                    best = (d, b, cand)
        if best is None:
            return None
        _, b, cand = best
        i, j = R.blocks[b]
        return R.seq[:i] + cand + R.seq[j:]

    def op_two_opt(self, s: State) -> State:
        used = [R.k for R in s.routes if R.seq]
        if not used:
            return s
        R = s.routes[self.rng.choice(used)]
        L = self.rng.randint(2, 4)
        start = self.rng.randrange(len(R.seq))
        best = None
        for p in range(start, len(R.seq) - L + 1):
            seg = R.seq[p:p + L]
            if any(self.ctx.kind[x] != MP for x in seg):
                continue
            b, _ = block_of_layer(R, self.ctx.layer[seg[0]])
            i, j = R.blocks[b]
            if p + L > j:
                continue
            mps = R.seq[i:p] + seg[::-1] + R.seq[p + L:j]
            d = replace_block(self.ctx, R, b, mps)
            if d is not None and d < -1e-9 and (best is None or d < best[0]):
                best = (d, R.seq[:i] + mps + R.seq[j:])
        if best is None:
            return s
        A = analyze(self.ctx, R.k, best[1])
        return self._commit(s, [A]) if A is not None else s

    def op_four_opt(self, s: State) -> State:
        used = [R.k for R in s.routes if R.seq]
        if not used:
            return s
        R = s.routes[self.rng.choice(used)]
        best = None
        for b, (i, j) in enumerate(R.blocks):
            for p in range(i, j - 2):
                trip = R.seq[p:p + 3]
                for perm in _perms3(trip):
                    mps = R.seq[i:p] + perm + R.seq[p + 3:j]
                    d = replace_block(self.ctx, R, b, mps)
                    if d is not None and d < -1e-9 and (best is None or d < best[0]):
                        best = (d, R.seq[:i] + mps + R.seq[j:])
            # a triple ending at the station: permute the last two pickups around it
            if j - i >= 2:
                pair = R.seq[j - 2:j]
                mps = R.seq[i:j - 2] + pair[::-1]
                d = replace_block(self.ctx, R, b, mps)
                if d is not None and d < -1e-9 and (best is None or d < best[0]):
                    best = (d, R.seq[:i] + mps + R.seq[j:])
        if best is None:
            return s
        A = analyze(self.ctx, R.k, best[1])
        return self._commit(s, [A]) if A is not None else s

    def op_exchange_segment(self, s: State) -> State:
        used = [R.k for R in s.routes if R.seq]
        if len(used) < 2:
            return s
        k1, k2 = self.rng.sample(used, 2)
        R1, R2 = s.routes[k1], s.routes[k2]
        for b1, (i1, j1) in enumerate(R1.blocks):
            for b2, (i2, j2) in enumerate(R2.blocks):
                seg1, seg2 = R1.seq[i1:j1 + 1], R2.seq[i2:j2 + 1]
                n1 = _place_block(self.ctx, R1.seq[:i1] + R1.seq[j1 + 1:], seg2)
                n2 = _place_block(self.ctx, R2.seq[:i2] + R2.seq[j2 + 1:], seg1)
                if n1 is None or n2 is None:
                    continue
                A1 = analyze(self.ctx, k1, n1)
                if A1 is None:
                    continue
                A2 = analyze(self.ctx, k2, n2)
                if A2 is None:
                    continue
                saving = R1.travel + R2.travel - A1.travel - A2.travel
                if saving > 1e-9:
                    return self._commit(s, [A1, A2])
        return s

    def op_exchange_customer(self, s: State) -> State:
        used = [R.k for R in s.routes if R.seq]
        if len(used) < 2:
            return s
        k1, k2 = self.rng.sample(used, 2)
        R1, R2 = s.routes[k1], s.routes[k2]
        ctx = self.ctx
        c1 = [x for x in R1.seq if ctx.kind[x] == MP]
        c2 = [x for x in R2.seq if ctx.kind[x] == MP]
        budget = 200
        for i in c1:
            for j in c2:
                budget -= 1
                if budget < 0:
                    return s
                n1 = _swap_in(ctx, R1.seq, i, j)
                if n1 is None:
                    continue
                A1 = analyze(ctx, k1, n1)
                if A1 is None:
                    continue
                seq2, d2 = remove_customer(ctx, R2, j)
                B2 = analyze(ctx, k2, seq2)
                if B2 is None:
                    continue
                # i goes back into route 2, else into other random routes
                targets = [k2] + [k for k in self.rng.sample(range(self.K), self.K) if k not in (k1, k2)][:self.K]
                placed = None
                for kt in targets:
                    base = B2 if kt == k2 else s.routes[kt]
                    opts = insertion_options(ctx, base, i)
                    if opts:
                        d, kind, idx = min(opts)
                        placed = (kt, apply_insertion(base, i, kind, idx, ctx), d)
                        break
                if placed is None:
                    continue
                kt, seqt, d = placed
                At = analyze(ctx, kt, seqt)
                if At is None:
                    continue
                old = R1.travel + R2.travel + (s.routes[kt].travel if kt not in (k1, k2) else 0.0)
                new = A1.travel + (At.travel if kt == k2 else B2.travel + At.travel)
                if new < old - 1e-9:
                    parts = [A1, At] if kt == k2 else [A1, B2, At]
                    return self._commit(s, parts)
        return s

    def op_create(self, s: State) -> State:
        if s.n_used() >= self.K or not s.pool:
            return s
        m = self.rng.choice(s.pool)
        idle = [R.k for R in s.routes if not R.seq]
        k = self.rng.choice(idle)
        seq = [m, self.ctx.station_of_layer[self.ctx.layer[m]]]
        A = analyze(self.ctx, k, seq)
        if A is None:
            return s
        return self._commit(s, [A])

    OPERATORS = ("relocate", "destroy_repair", "two_opt_star", "two_opt", "exchange_segment",
                 "exchange_customer", "four_opt", "create")

    def apply(self, name: str, s: State) -> State:
        return getattr(self, "op_" + name)(s)

    # -------------------------------------------------------- vehicle exchange
    def vehicle_exchange(self, s: State) -> State:
        """Swap the route of the heaviest-charging vehicle with another vehicle if that pays off."""
        ranked = sorted(range(self.K), key=lambda k: (-charge_time_with_access(self.ctx, s.routes[k]), k))
        k1 = ranked[0]
        if charge_time_with_access(self.ctx, s.routes[k1]) <= 0:
            return s
        R1 = s.routes[k1]
        for k2 in ranked[1:]:
            R2 = s.routes[k2]
            if self.vkey[k1] == self.vkey[k2]:
                continue
            grid = self.grid_without(s, (k1, k2))
            A1 = analyze(self.ctx, k2, list(R1.seq))
            A2 = analyze(self.ctx, k1, list(R2.seq))
            if A1 is None or A2 is None:
                continue
            N1 = finish_route(self.ctx, A1, self.rng, grid=grid, greedy=True)
            if N1 is None:
                continue
            for ch in N1.charges:
                grid.occupy(ch.charger, ch.start, ch.start + ch.duration)
            N2 = finish_route(self.ctx, A2, self.rng, grid=grid, greedy=True)
            if N2 is None:
                continue
            if N1.cost + N2.cost < R1.cost + R2.cost - 1e-9:
                t = s.copy()
                self.set_route(t, N1)
                self.set_route(t, N2)
                self.refresh(t)
                if self.no_conflict(t):
                    return t
        return s

    # -------------------------------------------------------- main loop
    def run(self, init: Optional[State] = None, progress: Optional[Callable[[dict], None]] = None) -> State:
        p = self.p
        s = init if init is not None else self.initial_solution()
        best = s
        T = self.t_max
        i_imp = 0
        stagnant = 0
        last_best = best.cost
        t0 = time.perf_counter()
        for it in range(1, p.iter_max + 1):
            i_imp += 1
            if stagnant >= p.n_stagnant:
                break
            if p.time_limit is not None and time.perf_counter() - t0 > p.time_limit:
                break
            op = self.rng.choice(self.OPERATORS)
            cand = self.apply(op, s)
            if cand is not s and cand.cost < s.cost + T and self.no_conflict(cand):
                s = self.vehicle_exchange(cand)
                if s.cost < best.cost - 1e-9 and s.n_used() <= self.K:
                    best = s
                    i_imp = 0
            if i_imp > 0:
                T -= self.t_max / p.t_red
                if T < 0:
                    T = self.rng.random() * self.t_max
                    if i_imp > p.n_imp * best.n_used():
                        s = best
                        i_imp = 0
            if it % 100 == 0:
                if abs(best.cost - last_best) <= 1e-9:
                    stagnant += 1
                else:
                    stagnant = 0
                    last_best = best.cost
                if progress is not None:
                    progress({"iter": it, "best": best.cost, "threshold": T, "unserved": len(best.pool)})
        return best

    # -------------------------------------------------------- re-targeting
    def with_assignment(self, assignment) -> "Search":
        """A session over a modified assignment sharing parameters and RNG."""
        return Search(self.inst, self.g, assignment, self.p, self.rng)

    def rehydrate(self, old: State, changed: Dict[int, List[int]]) -> Optional[State]:
        """Rebuild a state in this session's context.

        Unchanged routes keep their charging events; routes in ``changed`` get
        new sequences and greedy charging that avoids every other event.
        """
        s = State()
        s.routes = [None] * self.K
        s.where = {}
        grid = OccupancyGrid(len(self.inst.chargers), self.ctx.T)
        for R in old.routes:
            if R.k in changed:
                continue
            A = analyze(self.ctx, R.k, list(R.seq))
            if A is None:
                return None
            if R.charges:
                tl = timeline(self.ctx, R.k, A.seq, R.charges)
                if tl is None or not tl.time_ok or not tl.energy_ok:
                    return None
                A.charges, A.ctime, A.cost = list(R.charges), tl.ctime, tl.cost(self.ctx)
                for ch in R.charges:
                    grid.occupy(ch.charger, ch.start, ch.start + ch.duration)
            s.routes[R.k] = A
        for k in sorted(changed):
            A = analyze(self.ctx, k, list(changed[k]))
            if A is None:
                return None
            NR = finish_route(self.ctx, A, self.rng, grid=grid, greedy=True)
            if NR is None:
                return None
            for ch in NR.charges:
                if not grid.occupy(ch.charger, ch.start, ch.start + ch.duration):
                    return None
            s.routes[k] = NR
        for R in s.routes:
            for m in R.seq:
                if self.ctx.kind[m] == MP:
                    s.where[m] = R.k
        self.refresh(s)
        return s

    # -------------------------------------------------------- export
    def to_solution(self, s: State) -> Solution:
        ctx = self.ctx
        # label charger dummies: per physical charger, latest event gets the lowest copy
        per_charger: Dict[int, List[Tuple[float, int, int]]] = {}
        tls = {}
        for R in s.routes:
            tl = timeline(ctx, R.k, R.seq, R.charges)
            tls[R.k] = tl
            for i, v in enumerate(tl.nodes):
                if v < 0:
                    per_charger.setdefault(-v - 1, []).append((tl.B[i], R.k, i))
        dummy_of = {}
        for o, evs in per_charger.items():
            evs.sort()
            ids = self.g.charger_dummies[o]
            for rank, (_, k, i) in enumerate(evs):
                dummy_of[(k, i)] = ids[len(ids) - 1 - rank]
        routes = [route_plan(ctx, R.k, tls[R.k], dummy_of) for R in s.routes]
        mp_of = list(self.assignment.mp_of_request)
        sol = Solution(routes, mp_of)
        sol.objective = model_objective(sol, self.inst, self.g)
        sol.meta["charges"] = [{"vehicle": R.k, "charger": c.charger, "after": c.pos, "start": c.start,
                                "duration": c.duration,
                                "kwh": c.duration * ctx.ch_rate[c.charger]} for R in s.routes for c in R.charges]
        return sol


def _perms3(trip: List[int]) -> List[List[int]]:
    a, b, c = trip
    return [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]


def _place_block(ctx: Ctx, seq: List[int], block: List[int]) -> Optional[List[int]]:
    """Insert a whole block at its layer-sorted slot; None if that layer is already served."""
    lay = ctx.layer[block[0]]
    pos = 0
    i = 0
    while i < len(seq):
        j = i
        while ctx.kind[seq[j]] != STATION:
            j += 1
        bl = ctx.layer[seq[j]]
        if bl == lay:
            return None
        if bl > lay:
            break
        pos = j + 1
        i = j + 1
    return seq[:pos] + block + seq[pos:]


def _swap_in(ctx: Ctx, seq: List[int], i: int, j: int) -> Optional[List[int]]:
    """Customer j takes customer i's pickup slot (and i's drop-off when i rides alone)."""
    p = seq.index(i)
    if ctx.layer[i] == ctx.layer[j]:
        out = list(seq)
        out[p] = j
        return out
    # i alone in its block: replace the whole block
    if p + 1 < len(seq) and ctx.kind[seq[p + 1]] == STATION and (p == 0 or ctx.kind[seq[p - 1]] == STATION):
        rest = seq[:p] + seq[p + 2:]
        return _place_block(ctx, rest, [j, ctx.station_of_layer[ctx.layer[j]]])
    return None


def solve(inst, graph, assignment, params: Optional[DAParams] = None, seed: int = 0,
          progress: Optional[Callable[[dict], None]] = None) -> Tuple[Solution, Search, State]:
    search = Search(inst, graph, assignment, params, random.Random(seed))
    init = search.initial_solution()
    best = search.run(init, progress=progress) if search.p.iter_max > 0 else init
    return search.to_solution(best), search, best
