"""Post-optimization: per-layer customer reassignment for layers with unserved customers.

For each such layer the meeting points of that layer are re-selected,
re-distributed over the vehicles already visiting the layer and re-ordered,
with the rest of every route frozen. The layer subproblem minimises routing
time plus the rejection penalty (walking is ignored there) and is solved by
branch-and-bound over meeting-point activation. Modified routes get greedy,
conflict-free charging against the frozen events, and the new solution is
kept only when the full objective strictly improves.
"""

from __future__ import annotations

import itertools
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import bnb
from .assign import Assignment
from .dameta import DAParams, Route, Search, State, _block_times, analyze, remove_block_delta
from .evalsched import MP, Charge
from .model import EPS, Solution

log = logging.getLogger(__name__)

INF = float("inf")


# ---------------------------------------------------------------- layer subproblem

@dataclass
class VehicleSlot:
    k: int
    block: int               # index of the vehicle's block on the layer
    current: List[int]       # current meeting points in visiting order


@dataclass
class LayerReassignProblem:
    layer: int
    requests: List[int]                  # usable requests of the layer
    vehicles: List[VehicleSlot]
    candidates: List[int]                # candidate MP dummy nodes
    reach: List[Dict[int, float]]        # per request: candidate index -> walk time
    unserved_now: int
    exact_limit: int = 7                 # exact ordering up to this many MPs per vehicle
    partition_limit: int = 20000


@dataclass
class LayerReassignResult:
    seqs: Dict[int, List[int]]           # vehicle -> full new sequence
    mp_of: Dict[int, Optional[int]]      # request -> MP dummy node or None
    value: float                         # routing delta + penalty on the layer
    status_quo: float
    unserved: int
    proven: bool
    nodes: int


def layer_unserved(search: Search, state: State) -> Dict[int, List[int]]:
    """Layer -> requests whose assigned meeting point is not on any route."""
    g = search.g
    out: Dict[int, List[int]] = {}
    for r, m in enumerate(search.assignment.mp_of_request):
        if m is not None and m not in state.where:
            out.setdefault(g.layer_of_request[r], []).append(r)
    return {k: out[k] for k in sorted(out)}


def build_problem(search: Search, state: State, layer: int, max_candidates: int = 10,
                  exact_limit: int = 7) -> Optional[LayerReassignProblem]:
    """Collect the subproblem data; None if no vehicle visits the layer."""
    g, inst, ctx = search.g, search.inst, search.ctx
    L = g.layers[layer]
    qmax = max((v.capacity for v in inst.vehicles), default=0)
    reqs = [r for r in L.requests if inst.requests[r].reachable and inst.requests[r].passengers <= qmax]
    slots = []
    for R in state.routes:
        if not R.seq:
            continue
        if layer in R.blayer:
            b = R.blayer.index(layer)
            i, j = R.blocks[b]
            slots.append(VehicleSlot(R.k, b, list(R.seq[i:j])))
    if not slots:
        return None
    routed = [m for vs in slots for m in vs.current]
    mp_of = search.assignment.mp_of_request
    unserved = [r for r in reqs if mp_of[r] is None or mp_of[r] not in state.where]
    extra: Dict[int, float] = {}
    for r in unserved:
        for j, _, tw in inst.requests[r].reachable:
            n = g.mp_node[(layer, j)]
            if n not in routed:
                extra[n] = min(extra.get(n, INF), tw)
    room = max(0, max_candidates - len(routed))
    picked = sorted(extra, key=lambda n: (extra[n], n))[:room]
    cands = sorted(set(routed) | set(picked))
    idx = {n: c for c, n in enumerate(cands)}
    reach = []
    for r in reqs:
        d = {}
        for j, _, tw in inst.requests[r].reachable:
            n = g.mp_node[(layer, j)]
            if n in idx:
                d[idx[n]] = tw
        reach.append(d)
    return LayerReassignProblem(layer, reqs, slots, cands, reach, len(unserved), exact_limit)


def _free_delta(ctx, R: Route, b: int, mps: Sequence[int], load: int) -> Optional[float]:
    """Travel change for block b holding ``mps`` (any load pattern); None if infeasible."""
    if not mps:
        return remove_block_delta(ctx, R, b)
    if load > ctx.cap[R.k]:
        return None
    i, j = R.blocks[b]
    seq = R.seq
    st = seq[j]
    bt = _block_times(ctx, mps, st)
    if bt is None:
        return None
    dur, inner = bt
    tm, loc = ctx.tm, ctx.loc
    prevloc = loc[seq[i - 1]] if i > 0 else 0
    dprev = R.D[b - 1] if b > 0 else 0.0
    x_arr = dprev + tm[prevloc][loc[mps[0]]]
    s = max(x_arr, ctx.e[st] - dur)
    a = s + dur
    if a > ctx.l[st] + EPS or a + ctx.u[st] - R.D[b] > R.fafter[b] + EPS:
        return None
    old = tm[prevloc][loc[seq[i]]]
    for x in range(i, j):
        old += tm[loc[seq[x]]][loc[seq[x + 1]]]
    return tm[prevloc][loc[mps[0]]] + inner - old


class _LayerSolver:
    def __init__(self, search: Search, state: State, prob: LayerReassignProblem):
        self.s, self.st, self.p = search, state, prob
        ctx = search.ctx
        self.ctx = ctx
        self.omega = ctx.omega
        self.l1 = ctx.l1
        self.routes = [state.routes[vs.k] for vs in prob.vehicles]
        self.g_of = [search.inst.requests[r].passengers for r in prob.requests]
        self.unit = all(x == 1 for x in self.g_of)
        self.req_mask = [sum(1 << c for c in d) for d in prob.reach]
        self.order_cache: Dict[Tuple[int, int], Optional[Tuple[float, List[int]]]] = {}
        self.cur_vehicle = {}
        for v, vs in enumerate(prob.vehicles):
            for m in vs.current:
                self.cur_vehicle[prob.candidates.index(m)] = v
        self.base_lb = sum(remove_block_delta(ctx, R, vs.block) for R, vs in zip(self.routes, prob.vehicles))
        self.best_detail = None

    # travel of one vehicle serving a candidate subset, best visiting order
    def route_subset(self, v: int, mask: int) -> Optional[Tuple[float, List[int]]]:
        key = (v, mask)
        if key in self.order_cache:
            return self.order_cache[key]
        R, vs = self.routes[v], self.p.vehicles[v]
        nodes = [self.p.candidates[c] for c in range(len(self.p.candidates)) if mask >> c & 1]
        best = None
        if len(nodes) <= self.p.exact_limit:
            for perm in itertools.permutations(nodes):
                d = _free_delta(self.ctx, R, vs.block, perm, 0)
                if d is not None and (best is None or d < best[0] - 1e-12):
                    best = (d, list(perm))
        else:
            seq = [m for m in vs.current if m in nodes]
            for m in nodes:
                if m in seq:
                    continue
                opts = []
                for pos in range(len(seq) + 1):
                    trial = seq[:pos] + [m] + seq[pos:]
                    d = _free_delta(self.ctx, R, vs.block, trial, 0)
                    if d is not None:
                        opts.append((d, pos))
                if not opts:
                    seq = None
                    break
                _, pos = min(opts)
                seq = seq[:pos] + [m] + seq[pos:]
            if seq is not None:
                d = _free_delta(self.ctx, R, vs.block, seq, 0)
                if d is not None:
                    best = (d, seq)
        self.order_cache[key] = best
        return best

    # request -> (vehicle, candidate) maximising served count, then minimising walking
    def allocate(self, masks: Sequence[int]) -> Tuple[int, List[Optional[int]]]:
        reach = self.p.reach
        nreq = len(reach)
        K = len(masks)
        opts = []   # per request: per vehicle (walk, candidate) or None
        for r in range(nreq):
            row = []
            for v in range(K):
                best = None
                for c, w in reach[r].items():
                    if masks[v] >> c & 1 and (best is None or w < best[0] - 1e-12 or
                                              (abs(w - best[0]) <= 1e-12 and c < best[1])):
                        best = (w, c)
                row.append(best)
            opts.append(row)
        caps = [self.ctx.cap[vs.k] for vs in self.p.vehicles]
        # fast path: nearest choice fits everywhere
        loads = [0] * K
        choice: List[Optional[Tuple[int, int]]] = []
        for r in range(nreq):
            cand = [(o[0], v, o[1]) for v, o in enumerate(opts[r]) if o is not None]
            if not cand:
                choice.append(None)
                continue
            _, v, c = min(cand)
            loads[v] += self.g_of[r]
            choice.append((v, c))
        if all(loads[v] <= caps[v] for v in range(K)):
            return sum(1 for x in choice if x is None), [None if x is None else x[1] for x in choice]
        return self._allocate_capacitated(opts, caps)

    def _allocate_capacitated(self, opts, caps):
        import numpy as np
        nreq, K = len(opts), len(caps)
        big = 1e4
        if self.unit:
            from scipy.optimize import linear_sum_assignment
            cols = []
            for v in range(K):
                cols += [v] * min(caps[v], nreq)
            C = np.full((nreq, len(cols) + nreq), 0.0)
            for r in range(nreq):
                for x, v in enumerate(cols):
                    o = opts[r][v]
                    C[r, x] = o[0] - big if o is not None else 1e9
            rows, cs = linear_sum_assignment(C)
            out: List[Optional[int]] = [None] * nreq
            for r, x in zip(rows, cs):
                if x < len(cols) and C[r, x] < 0:
                    out[r] = opts[r][cols[x]][1]
            return sum(1 for x in out if x is None), out
        from scipy.optimize import Bounds, LinearConstraint, milp
        pairs = [(r, v) for r in range(nreq) for v in range(K) if opts[r][v] is not None]
        if not pairs:
            return nreq, [None] * nreq
        c = np.array([opts[r][v][0] - big for r, v in pairs])
        A_req = np.zeros((nreq, len(pairs)))
        A_cap = np.zeros((K, len(pairs)))
        for x, (r, v) in enumerate(pairs):
            A_req[r, x] = 1
            A_cap[v, x] = self.g_of[r]
        res = milp(c, integrality=np.ones(len(pairs)), bounds=Bounds(0, 1),
                   constraints=[LinearConstraint(A_req, 0, 1), LinearConstraint(A_cap, 0, np.array(caps))],
                   options={"mip_rel_gap": 0.0})
        out = [None] * nreq
        if res.x is not None:
            for x, (r, v) in enumerate(pairs):
                if res.x[x] > 0.5:
                    out[r] = opts[r][v][1]
        return sum(1 for x in out if x is None), out

    # ------------------------------------------------------------ leaf
    def evaluate_set(self, S: List[int]):
        """Best (value, masks, orders, allocation) for an activation set; None if infeasible."""
        K = len(self.p.vehicles)
        if not S:
            masks = [0] * K
            parts = [masks]
        elif K ** len(S) <= self.p.partition_limit:
            parts = []
            for combo in itertools.product(range(K), repeat=len(S)):
                masks = [0] * K
                for c, v in zip(S, combo):
                    masks[v] |= 1 << c
                parts.append(masks)
        else:
            parts = [self._heuristic_partition(S)]
        best = None
        for masks in parts:
            if masks is None:
                continue
            travel = 0.0
            orders = []
            for v in range(K):
                rs = self.route_subset(v, masks[v])
                if rs is None:
                    travel = None
                    break
                travel += rs[0]
                orders.append(rs[1])
            if travel is None:
                continue
            uncov = sum(1 for m in self.req_mask if not any(masks[v] & m for v in range(K)))
            if best is not None and self.l1 * travel + self.omega * uncov >= best[0] - 1e-9:
                continue
            n_un, alloc = self.allocate(masks)
            used = {c for c in alloc if c is not None}
            if len(used) != len(S):
                continue                     # an activated MP without passengers is dominated
            loads = [0] * K
            for r, c in enumerate(alloc):
                if c is not None:
                    for v in range(K):
                        if masks[v] >> c & 1:
                            loads[v] += self.g_of[r]
            if any(loads[v] > self.ctx.cap[self.p.vehicles[v].k] for v in range(K)):
                continue
            val = self.l1 * travel + self.omega * n_un
            if best is None or val < best[0] - 1e-9:
                best = (val, list(masks), orders, alloc, n_un)
        return best

    def _heuristic_partition(self, S: List[int]) -> Optional[List[int]]:
        K = len(self.p.vehicles)
        masks = [0] * K
        for c in S:
            if c in self.cur_vehicle:
                masks[self.cur_vehicle[c]] |= 1 << c
        for c in S:
            if c in self.cur_vehicle:
                continue
            opts = []
            for v in range(K):
                rs = self.route_subset(v, masks[v] | 1 << c)
                if rs is not None:
                    base = self.route_subset(v, masks[v])
                    opts.append((rs[0] - (base[0] if base else 0.0), v))
            if not opts:
                return None
            masks[min(opts)[1]] |= 1 << c
        return masks

    # ------------------------------------------------------------ bnb
    def solve(self, time_limit: Optional[float], node_limit: Optional[int] = None):
        n = len(self.p.candidates)
        x0 = [1 if c in self.cur_vehicle else 0 for c in range(n)]
        status_quo = self.omega * self.p.unserved_now

        def bound(partial):
            avail = 0
            for c, v in enumerate(partial):
                if v is None or v == 1:
                    avail |= 1 << c
            uncov = sum(1 for m in self.req_mask if not m & avail)
            return self.l1 * self.base_lb + self.omega * uncov

        cache: Dict[Tuple[int, ...], object] = {}

        def evaluate(x):
            key = tuple(x)
            if key not in cache:
                cache[key] = self.evaluate_set([c for c in range(n) if x[c]])
            res = cache[key]
            return None if res is None else res[0]

        prob = bnb.BnbProblem(n, bound, evaluate, incumbent=(x0, status_quo), time_limit=time_limit,
                              node_limit=node_limit)
        res = bnb.solve(prob)
        detail = cache.get(tuple(res.solution)) if res.solution is not None else None
        return res, detail, status_quo


def reassign_layer(search: Search, state: State, layer: int, time_limit: Optional[float] = 30.0,
                   max_candidates: int = 10, node_limit: Optional[int] = None
                   ) -> Optional[LayerReassignResult]:
    """Solve the layer subproblem; None when nothing strictly better than the status quo is found."""
    prob = build_problem(search, state, layer, max_candidates)
    if prob is None or prob.unserved_now == 0:
        return None
    solver = _LayerSolver(search, state, prob)
    res, detail, sq = solver.solve(time_limit, node_limit)
    if detail is None or res.value >= sq - 1e-9:
        return None
    val, masks, orders, alloc, n_un = detail
    seqs = {}
    for vs, order in zip(prob.vehicles, orders):
        R = state.routes[vs.k]
        i, j = R.blocks[vs.block]
        if order:
            seqs[vs.k] = R.seq[:i] + list(order) + R.seq[j:]
        else:
            seqs[vs.k] = R.seq[:i] + R.seq[j + 1:]
    mp_of = {r: (None if c is None else prob.candidates[c]) for r, c in zip(prob.requests, alloc)}
    return LayerReassignResult(seqs, mp_of, val, sq, n_un, res.proven, res.nodes)


# ---------------------------------------------------------------- driver

@dataclass
class PostOptResult:
    solution: Solution
    search: Search
    state: State
    success: bool
    layers: List[dict] = field(default_factory=list)


def post_optimize(search: Search, state: State, time_limit: float = 30.0, max_candidates: int = 10,
                  node_limit: Optional[int] = None) -> PostOptResult:
    """Reassign customers on every layer with unserved customers, in ascending layer order."""
    cur_search, cur_state = search, state
    report = []
    changed_any = False
    todo = layer_unserved(search, state)
    for layer in sorted(todo):
        t0 = time.perf_counter()
        res = reassign_layer(cur_search, cur_state, layer, time_limit, max_candidates, node_limit)
        entry = {"layer": layer, "accepted": False, "seconds": 0.0}
        if res is not None:
            mp_of = list(cur_search.assignment.mp_of_request)
            for r, m in res.mp_of.items():
                mp_of[r] = m
            asg = Assignment(mp_of, sorted({m for m in mp_of if m is not None}),
                             dict(cur_search.assignment.layer_value), cur_search.assignment.proven,
                             dict(cur_search.assignment.rho))
            new_search = cur_search.with_assignment(asg)
            new_state = new_search.rehydrate(cur_state, res.seqs)
            entry.update(value=res.value, status_quo=res.status_quo, proven=res.proven, nodes=res.nodes)
            if new_state is None:
                entry["reason"] = "charging"
            elif new_state.cost < cur_state.cost - 1e-9 and new_search.no_conflict(new_state):
                cur_search, cur_state = new_search, new_state
                entry["accepted"] = True
                changed_any = True
            else:
                entry["reason"] = "no improvement"
        entry["seconds"] = time.perf_counter() - t0
        report.append(entry)
        log.info("post-opt layer %d: %s", layer, entry)
    sol = cur_search.to_solution(cur_state)
    # wall times stay out of the solution so it is reproducible byte for byte
    sol.meta["postopt"] = [{k: v for k, v in e.items() if k != "seconds"} for e in report]
    return PostOptResult(sol, cur_search, cur_state, changed_any or not todo, report)


# ---------------------------------------------------------------- solution import

def state_from_solution(inst, graph, sol: Solution, params: Optional[DAParams] = None,
                        seed: int = 0) -> Tuple[Search, State]:
    """Rebuild a search session and state from a stored solution."""
    asg = Assignment(list(sol.mp_of_request), sorted({m for m in sol.mp_of_request if m is not None}))
    search = Search(inst, graph, asg, params or DAParams(), random.Random(seed))
    ctx = search.ctx
    s = State()
    s.routes = [analyze(ctx, k, []) for k in range(search.K)]
    s.where = {}
    for rp in sol.routes:
        seq: List[int] = []
        charges = []
        for i, n in enumerate(rp.nodes):
            kind = graph.kind[n]
            if kind in ("mp", "station"):
                seq.append(n)
            elif kind == "charger":
                charges.append(Charge(len(seq) - 1, graph.charger_index[n], rp.B[i], rp.tau[i]))
        R = analyze(ctx, rp.vehicle, seq)
        if R is None:
            raise ValueError(f"route of vehicle {rp.vehicle} is not time-feasible")
        if charges:
            from .evalsched import timeline
            tl = timeline(ctx, rp.vehicle, seq, charges)
            if tl is None or not tl.time_ok or not tl.energy_ok:
                raise ValueError(f"charging plan of vehicle {rp.vehicle} is infeasible")
            R.charges, R.ctime, R.cost = charges, tl.ctime, tl.cost(ctx)
        s.routes[rp.vehicle] = R
        for m in seq:
            if ctx.kind[m] == MP:
                s.where[m] = rp.vehicle
    search.refresh(s)
    return search, s
