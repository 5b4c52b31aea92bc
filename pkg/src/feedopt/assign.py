"""Customer-to-meeting-point assignment.

Per layer the model trades walking time against a dispersion cost: every
ordered pair of activated meeting points on the layer adds its drive time,
weighted by rho. The layered solver branches on meeting-point activation
and assigns requests optimally for each activation set; the flat solver
hands the whole monolithic model to HiGHS.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import bnb

log = logging.getLogger(__name__)

Rho = Union[float, Sequence[float], Dict[int, float]]


@dataclass
class Assignment:
    mp_of_request: List[Optional[int]]        # MP dummy node per request, None if unassigned
    activated: List[int]                      # sorted MP dummy nodes with assigned requests
    layer_value: Dict[int, float] = field(default_factory=dict)
    proven: bool = True
    rho: Dict[int, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return sum(self.layer_value[k] for k in sorted(self.layer_value))

    def groups(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for r, m in enumerate(self.mp_of_request):
            if m is not None:
                out.setdefault(m, []).append(r)
        return {m: out[m] for m in sorted(out)}

    def to_dict(self) -> dict:
        return {"mp_of_request": self.mp_of_request, "activated": self.activated,
                "layer_value": {str(k): v for k, v in sorted(self.layer_value.items())},
                "proven": self.proven, "rho": {str(k): v for k, v in sorted(self.rho.items())}}


def rho_vector(rho: Rho, layers: Sequence[int]) -> Dict[int, float]:
    if isinstance(rho, dict):
        out = {li: float(rho.get(li, 0.2)) for li in layers}
    elif isinstance(rho, (int, float)):
        out = {li: float(rho) for li in layers}
    else:
        seq = list(rho)
        out = {li: float(seq[li]) for li in layers}
    if any(v < 0 for v in out.values()):
        raise ValueError("rho must be non-negative")
    return out


class LayerProblem:
    """One layer's assignment data in local indices."""

    def __init__(self, graph, inst, li: int, rho: float):
        w = inst.weights
        L = graph.layers[li]
        self.layer = li
        self.nodes = list(L.mp_nodes)                # local j -> dummy node
        local = {graph.mp_index[n]: j for j, n in enumerate(self.nodes)}
        self.qmax = max((v.capacity for v in inst.vehicles), default=0)
        self.requests: List[int] = []
        self.rejected: List[int] = []
        self.cand: List[List[int]] = []
        self.walk: List[Dict[int, float]] = []
        for r in L.requests:
            req = inst.requests[r]
            if not req.reachable or req.passengers > self.qmax:
                self.rejected.append(r)
                continue
            self.requests.append(r)
            js = sorted(local[m] for m, _, _ in req.reachable)
            self.cand.append(js)
            self.walk.append({local[m]: t for m, _, t in req.reachable})
        n = len(self.nodes)
        self.n = n
        self.t = [[graph.t(a, b) for b in self.nodes] for a in self.nodes]
        self.lam2 = w.lambda2
        self.pair_w = 2.0 * w.lambda1 * rho   # ordered pairs counted once each way
        self.cand_mask = [sum(1 << j for j in js) for js in self.cand]
        # minimum drive time between the candidate sets of two requests
        R = len(self.requests)
        self.cross = [[0.0] * R for _ in range(R)]
        for a in range(R):
            for b in range(a + 1, R):
                v = min(self.t[i][j] for i in self.cand[a] for j in self.cand[b])
                self.cross[a][b] = self.cross[b][a] = v

    # -------------------------------------------------------- evaluation
    def pair_cost(self, active: Sequence[int]) -> float:
        s = 0.0
        for x, i in enumerate(active):
            ti = self.t[i]
            for j in active[x + 1:]:
                s += ti[j]
        return self.pair_w * s

    def assign(self, active: Sequence[int]) -> Optional[List[int]]:
        """Optimal request -> local MP for a fixed activation set (None if some request is stranded)."""
        act = set(active)
        choice = []
        for js, wk in zip(self.cand, self.walk):
            best = None
            for j in js:
                if j in act and (best is None or wk[j] < wk[best] - 1e-12):
                    best = j
            if best is None:
                return None
            choice.append(best)
        counts: Dict[int, int] = {}
        for j in choice:
            counts[j] = counts.get(j, 0) + 1
        if all(c <= self.qmax for c in counts.values()):
            return choice
        return self._capacitated(sorted(act))

    def _capacitated(self, active: List[int]) -> Optional[List[int]]:
        from scipy.optimize import linear_sum_assignment
        R = len(self.requests)
        if R > len(active) * self.qmax:
            return None
        big = 1e9
        cols = [j for j in active for _ in range(min(self.qmax, R))]
        cost = np.full((R, len(cols)), big)
        for r, (js, wk) in enumerate(zip(self.cand, self.walk)):
            for c, j in enumerate(cols):
                if j in wk:
                    cost[r, c] = wk[j]
        rows, cs = linear_sum_assignment(cost)
        if any(cost[r, c] >= big for r, c in zip(rows, cs)):
            return None
        out = [0] * R
        for r, c in zip(rows, cs):
            out[r] = cols[c]
        return out

    def value(self, active: Sequence[int]) -> Optional[float]:
        choice = self.assign(active)
        if choice is None:
            return None
        walk = sum(self.walk[r][j] for r, j in enumerate(choice))
        return self.lam2 * walk + self.pair_cost(sorted(set(active)))

    # -------------------------------------------------------- heuristics
    def greedy(self) -> List[int]:
        """Nearest-MP activation followed by greedy drops."""
        act = sorted({min(js, key=lambda j: (wk[j], j)) for js, wk in zip(self.cand, self.walk)})
        cur = self.value(act)
        if cur is None:
            act = sorted({j for js in self.cand for j in js})
            cur = self.value(act)
        improved = True
        while improved and cur is not None:
            improved = False
            best = None
            for j in act:
                trial = [x for x in act if x != j]
                v = self.value(trial)
                if v is not None and v < cur - 1e-9 and (best is None or v < best[0]):
                    best = (v, trial)
            if best is not None:
                cur, act = best
                improved = True
        return act


def solve_layer(lp: LayerProblem, time_limit: Optional[float] = None,
                node_limit: Optional[int] = None) -> tuple:
    """Exact activation search for one layer: returns (active list, value, proven)."""
    n = lp.n
    if not lp.requests:
        return [], 0.0, True
    inc = lp.greedy()
    inc_v = lp.value(inc)
    # branch on popular MPs first
    pop = [0] * n
    for js in lp.cand:
        for j in js:
            pop[j] += 1
    order = sorted(range(n), key=lambda j: (-pop[j], j))
    state = {"A": 0, "Z": 0, "pairs": 0.0}
    sumA = [0.0] * n
    t = lp.t

    def on_fix(j, val):
        if val == 1:
            state["pairs"] += sumA[j]
            state["A"] |= 1 << j
            tj = t[j]
            for i in range(n):
                sumA[i] += tj[i]
        else:
            state["Z"] |= 1 << j

    def on_unfix(j):
        bit = 1 << j
        if state["A"] & bit:
            state["A"] &= ~bit
            tj = t[j]
            for i in range(n):
                sumA[i] -= tj[i]
            state["pairs"] -= sumA[j]
        else:
            state["Z"] &= ~bit

    lam2, pw = lp.lam2, lp.pair_w

    def bound(partial):
        A, Z = state["A"], state["Z"]
        U = ~(A | Z)
        base = 0.0
        extra = []
        for r, (js, wk) in enumerate(zip(lp.cand, lp.walk)):
            m = lp.cand_mask[r]
            if not m & ~Z:
                return None
            best = None
            for j in js:
                if not (Z >> j) & 1:
                    w = wk[j]
                    if best is None or w < best:
                        best = w
            base += best
            if m & A:
                continue
            c = None
            for j in js:
                if (U >> j) & 1:
                    v = lam2 * (wk[j] - best) + pw * sumA[j]
                    if c is None or v < c:
                        c = v
            extra.append((c, r, m & U))
        lb = lam2 * base + pw * state["pairs"]
        if extra:
            extra.sort(key=lambda x: (-x[0], x[1]))
            used = 0
            chosen = []
            for c, r, m in extra:
                if not m & used:
                    used |= m
                    chosen.append(r)
                    lb += c
            if pw > 0:
                for x, a in enumerate(chosen):
                    ca = lp.cross[a]
                    for b in chosen[x + 1:]:
                        lb += pw * ca[b]
        return lb

    def evaluate(x):
        return lp.value([j for j in range(n) if x[j]])

    inc_x = [1 if j in set(inc) else 0 for j in range(n)]
    prob = bnb.BnbProblem(n, bound, evaluate, order=order,
                          incumbent=(inc_x, inc_v) if inc_v is not None else None,
                          time_limit=time_limit, node_limit=node_limit, on_fix=on_fix, on_unfix=on_unfix)
    res = bnb.solve(prob)
    if res.solution is None:
        return None, float("inf"), res.proven
    act = [j for j in range(n) if res.solution[j]]
    return act, res.value, res.proven


def _finish(graph, inst, per_layer: Dict[int, tuple], rho: Dict[int, float]) -> Assignment:
    mp_of = [None] * len(inst.requests)
    activated = []
    values = {}
    proven = True
    for li in sorted(per_layer):
        lp, act, val, pr = per_layer[li]
        proven &= pr
        values[li] = val if act is not None else 0.0
        if act is None:
            continue
        choice = lp.assign(act)
        used = set()
        for r_local, j in enumerate(choice or []):
            mp_of[lp.requests[r_local]] = lp.nodes[j]
            used.add(lp.nodes[j])
        activated.extend(sorted(used))
        for r in lp.rejected:
            log.warning("request %d has no usable meeting point; left unassigned", r)
    return Assignment(mp_of, sorted(activated), values, proven, rho)


def assign_layered(graph, inst, rho: Rho = 0.2, time_limit: Optional[float] = None,
                   node_limit: Optional[int] = None) -> Assignment:
    """Per-layer exact assignment; the limits apply to each layer (node limits keep runs reproducible)."""
    rv = rho_vector(rho, graph.active)
    per = {}
    for li in graph.active:
        lp = LayerProblem(graph, inst, li, rv[li])
        act, val, proven = solve_layer(lp, time_limit=time_limit, node_limit=node_limit)
        per[li] = (lp, act, val, proven)
    return _finish(graph, inst, per, rv)


def assign_flat(graph, inst, rho: Rho = 0.2, time_limit: Optional[float] = None) -> Assignment:
    """Monolithic model over every MP dummy node, solved with HiGHS."""
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import coo_matrix

    rv = rho_vector(rho, graph.active)
    w = inst.weights
    lps = {li: LayerProblem(graph, inst, li, rv[li]) for li in graph.active}
    cols_c: List[float] = []
    ycol: Dict[tuple, int] = {}
    thcol: Dict[tuple, int] = {}
    zcol: Dict[tuple, int] = {}
    for li, lp in lps.items():
        for j in range(lp.n):
            thcol[(li, j)] = len(cols_c); cols_c.append(0.0)
        for r, wk in enumerate(lp.walk):
            for j in lp.cand[r]:
                ycol[(li, r, j)] = len(cols_c); cols_c.append(w.lambda2 * wk[j])
        for i in range(lp.n):
            for j in range(i + 1, lp.n):
                zcol[(li, i, j)] = len(cols_c); cols_c.append(lp.pair_w * lp.t[i][j])
    nv = len(cols_c)
    if nv == 0:
        return _finish(graph, inst, {li: (lp, [], 0.0, True) for li, lp in lps.items()}, rv)
    rows, cols, vals, lo, hi = [], [], [], [], []

    def row(entries, l, h):
        k = len(lo)
        for c, v in entries:
            rows.append(k); cols.append(c); vals.append(v)
        lo.append(l); hi.append(h)

    for li, lp in lps.items():
        M = len(lp.requests)
        for r in range(len(lp.requests)):
            row([(ycol[(li, r, j)], 1.0) for j in lp.cand[r]], 1.0, 1.0)
        for j in range(lp.n):
            ys = [ycol[(li, r, j)] for r in range(len(lp.requests)) if (li, r, j) in ycol]
            if ys:
                row([(c, 1.0) for c in ys], -np.inf, lp.qmax)
                row([(c, 1.0) for c in ys] + [(thcol[(li, j)], -float(M))], -np.inf, 0.0)
                for c in ys:
                    row([(c, 1.0), (thcol[(li, j)], -1.0)], -np.inf, 0.0)
        for i in range(lp.n):
            for j in range(i + 1, lp.n):
                z = zcol[(li, i, j)]
                row([(z, 1.0), (thcol[(li, i)], -1.0)], -np.inf, 0.0)
                row([(z, 1.0), (thcol[(li, j)], -1.0)], -np.inf, 0.0)
                row([(z, 1.0), (thcol[(li, i)], -1.0), (thcol[(li, j)], -1.0)], -1.0, np.inf)
    A = coo_matrix((vals, (rows, cols)), shape=(len(lo), nv)).tocsr()
    opts = {"mip_rel_gap": 0.0}
    if time_limit is not None:
        opts["time_limit"] = time_limit
    res = milp(np.asarray(cols_c), constraints=LinearConstraint(A, lo, hi),
               integrality=np.ones(nv), bounds=Bounds(0, 1), options=opts)
    if res.x is None:
        raise RuntimeError(f"flat assignment failed: {res.message}")
    x = np.round(res.x).astype(int)
    proven = res.status == 0
    per = {}
    for li, lp in lps.items():
        act = [j for j in range(lp.n) if x[thcol[(li, j)]]]
        # keep only MPs that actually receive requests (an empty activation never helps)
        used = sorted({j for r in range(len(lp.requests)) for j in lp.cand[r] if x[ycol[(li, r, j)]]})
        if not lp.requests:
            per[li] = (lp, [], 0.0, proven)
            continue
        val = lp.value(used)
        per[li] = (lp, used if val is not None else act, val if val is not None else lp.value(act), proven)
    return _finish(graph, inst, per, rv)


def layer_value(graph, inst, li: int, rho: float, active_nodes: Sequence[int]) -> Optional[float]:
    """Objective of one layer for a given set of activated MP dummy nodes."""
    lp = LayerProblem(graph, inst, li, rho)
    pos = {n: j for j, n in enumerate(lp.nodes)}
    return lp.value(sorted(pos[n] for n in active_nodes))


def tune_rho(inst, graph, evaluate, budget: int = 15, grid: Optional[Sequence[float]] = None,
             delta: float = 1.5, extra_runs: int = 5) -> Dict[int, float]:
    """Two-step rho search.

    ``evaluate(rho_vector) -> (objective, unserved_layers)`` runs the full
    pipeline. Step one scans a uniform grid and refines around the winner;
    step two scales rho on layers that still have unserved customers.
    """
    if budget < 3:
        raise ValueError("budget must be at least 3")
    if grid is None:
        grid = [0.2, 0.4, 0.6] if len(inst.requests) > 50 else [round(0.2 * i, 10) for i in range(1, 11)]
    runs = 0
    best = None  # (objective, rho value tie-break, vector, unserved layers)

    def run(vec: Dict[int, float], key: float):
        nonlocal runs, best
        runs += 1
        obj, bad = evaluate(vec)
        # ties go to the smaller rho
        if best is None or obj < best[0] - 1e-9 or (abs(obj - best[0]) <= 1e-9 and key < best[1]):
            best = (obj, key, vec, sorted(bad))

    for r in grid:
        if runs >= budget:
            break
        run({li: r for li in graph.active}, r)
    rt = best[1]
    for r in (round(rt - 0.1, 10), round(rt + 0.1, 10)):
        if runs >= budget or r < 0 or r in grid:
            continue
        run({li: r for li in graph.active}, r)
    cur = dict(best[2])
    bad = best[3]
    for _ in range(extra_runs):
        if not bad or runs >= budget:
            break
        cur = {li: (v * delta if li in bad else v) for li, v in cur.items()}
        runs += 1
        o, b = evaluate(cur)
        if o < best[0] - 1e-9:
            best = (o, best[1], dict(cur), sorted(b))
        bad = sorted(b)
    return best[2]
