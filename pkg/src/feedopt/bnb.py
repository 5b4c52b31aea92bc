"""Depth-first branch-and-bound over binary vectors.

The caller supplies an admissible lower bound on partial fixings and an
evaluator for complete vectors. Children are explored best-bound first, so
good incumbents appear early; the search is anytime and deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

Partial = List[Optional[int]]


@dataclass
class BnbProblem:
    n_vars: int
    bound: Callable[[Partial], Optional[float]]
    evaluate: Callable[[List[int]], Optional[float]]
    order: Optional[Sequence[int]] = None
    incumbent: Optional[Tuple[List[int], float]] = None
    time_limit: Optional[float] = None
    node_limit: Optional[int] = None
    tol: float = 1e-6
    # optional hooks to keep incremental state in sync with the partial vector
    on_fix: Optional[Callable[[int, int], None]] = None
    on_unfix: Optional[Callable[[int], None]] = None
    # preferred value to try first on bound ties
    prefer: int = 1


@dataclass
class BnbResult:
    status: str  # "optimal", "limit" or "infeasible"
    solution: Optional[List[int]]
    value: float
    bound: float
    proven: bool
    nodes: int
    trace: List[float]


def solve(p: BnbProblem) -> BnbResult:
    t0 = time.perf_counter()
    n = p.n_vars
    order = list(p.order) if p.order is not None else list(range(n))
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the variables")
    best_x: Optional[List[int]] = list(p.incumbent[0]) if p.incumbent else None
    best_v = p.incumbent[1] if p.incumbent else float("inf")
    trace: List[float] = [best_v] if p.incumbent else []
    partial: Partial = [None] * n
    nodes = 0

    def out_of_budget() -> bool:
        if p.time_limit is not None and time.perf_counter() - t0 >= p.time_limit:
            return True
        return p.node_limit is not None and nodes >= p.node_limit

    if out_of_budget():
        return BnbResult("limit", best_x, best_v, -float("inf"), False, 0, trace)

    def fix(var: int, val: int):
        partial[var] = val
        if p.on_fix:
            p.on_fix(var, val)

    def unfix(var: int):
        partial[var] = None
        if p.on_unfix:
            p.on_unfix(var)

    root = p.bound(partial)
    if root is None:
        return BnbResult("infeasible", None, float("inf"), float("inf"), True, 1, trace)
    if n == 0:
        v = p.evaluate([])
        if v is not None and v < best_v:
            best_x, best_v = [], v
            trace.append(v)
        st = "optimal" if best_x is not None else "infeasible"
        return BnbResult(st, best_x, best_v, best_v, True, 1, trace)

    # explicit stack of (depth, pending children [(lb, val)], fixed value or None)
    stack: List[Tuple[int, List[Tuple[float, int]]]] = []
    aborted = False

    def expand(depth: int) -> List[Tuple[float, int]]:
        var = order[depth]
        kids = []
        for val in (p.prefer, 1 - p.prefer):
            fix(var, val)
            lb = p.bound(partial)
            unfix(var)
            if lb is not None and lb < best_v - p.tol:
                kids.append((lb, 0 if val == p.prefer else 1, val))
        kids.sort()
        return [(lb, val) for lb, _, val in reversed(kids)]  # pop() takes the best

    stack.append((0, expand(0)))
    nodes = 1
    while stack:
        if out_of_budget():
            aborted = True
            break
        depth, kids = stack[-1]
        var = order[depth]
        if partial[var] is not None:
            unfix(var)
        while kids and kids[-1][0] >= best_v - p.tol:
            kids.pop()
        if not kids:
            stack.pop()
            continue
        lb, val = kids.pop()
        fix(var, val)
        nodes += 1
        if depth + 1 == n:
            v = p.evaluate([int(x) for x in partial])
            if v is not None and v < best_v - p.tol:
                best_v, best_x = v, [int(x) for x in partial]
                trace.append(v)
            unfix(var)
            continue
        stack.append((depth + 1, expand(depth + 1)))

    if aborted:
        pend = [lb for _, kids in stack for lb, _ in kids]
        gb = min([best_v] + pend)
        for depth, _ in stack:
            if partial[order[depth]] is not None:
                unfix(order[depth])
        return BnbResult("limit", best_x, best_v, gb, False, nodes, trace)
    st = "optimal" if best_x is not None else "infeasible"
    return BnbResult(st, best_x, best_v, best_v, True, nodes, trace)


def enumerate_all(n: int, evaluate: Callable[[List[int]], Optional[float]]) -> Tuple[Optional[List[int]], float]:
    """Exhaustive 2^n reference used by tests and tiny exact solves."""
    best_x, best_v = None, float("inf")
    for mask in range(1 << n):
        x = [(mask >> i) & 1 for i in range(n)]
        v = evaluate(x)
        if v is not None and v < best_v:
            best_x, best_v = x, v
    return best_x, best_v
