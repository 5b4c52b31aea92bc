import itertools

import pytest
from hypothesis import given, settings, strategies as st

from feedopt.bnb import BnbProblem, enumerate_all, solve


def knapsack(costs, weights, cap, pair):
    """Minimise a linear cost with a capacity limit and one quadratic pair bonus."""
    n = len(costs)
    a, b, bonus = pair

    def evaluate(x):
        if sum(w for w, v in zip(weights, x) if v) > cap:
            return None
        return sum(c for c, v in zip(costs, x) if v) + (bonus if x[a] and x[b] else 0.0)

    def bound(partial):
        if sum(w for w, v in zip(weights, partial) if v == 1) > cap:
            return None
        lb = sum(c for c, v in zip(costs, partial) if v == 1)
        lb += sum(min(0.0, c) for c, v in zip(costs, partial) if v is None)
        if partial[a] != 0 and partial[b] != 0:
            lb += min(0.0, bonus)
        return lb

    return n, bound, evaluate


def brute(n, evaluate):
    best = float("inf")
    for x in itertools.product((0, 1), repeat=n):
        v = evaluate(list(x))
        if v is not None and v < best:
            best = v
    return best


problems = st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=n, max_size=n),
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
    st.integers(0, 15),
    st.tuples(st.integers(0, n - 1), st.integers(0, n - 1), st.floats(-5, 5, allow_nan=False)),
))


@settings(max_examples=150, deadline=None)
@given(problems, st.integers(0, 1))
def test_matches_exhaustive(prob, prefer):
    n, bound, evaluate = knapsack(*prob)
    res = solve(BnbProblem(n, bound, evaluate, prefer=prefer))
    want = brute(n, evaluate)
    assert res.proven
    assert res.value == pytest.approx(want, abs=1e-6)
    assert evaluate(res.solution) == pytest.approx(res.value)
    assert enumerate_all(n, evaluate)[1] == pytest.approx(want, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(problems, st.randoms(use_true_random=False))
def test_any_branching_order(prob, rnd):
    n, bound, evaluate = knapsack(*prob)
    order = list(range(n))
    rnd.shuffle(order)
    res = solve(BnbProblem(n, bound, evaluate, order=order))
    assert res.value == pytest.approx(brute(n, evaluate), abs=1e-6)


def test_trace_is_decreasing():
    n, bound, evaluate = knapsack([3, -2, -5, 1, -4, -1, 2, -3], [1, 2, 3, 1, 2, 2, 1, 3], 7, (1, 4, -2.0))
    res = solve(BnbProblem(n, bound, evaluate))
    assert all(b < a for a, b in zip(res.trace, res.trace[1:]))
    assert res.trace[-1] == res.value


def test_incumbent_is_kept_when_nothing_better():
    n, bound, evaluate = knapsack([1.0, 2.0, 3.0], [1, 1, 1], 3, (0, 1, 0.0))
    res = solve(BnbProblem(n, bound, evaluate, incumbent=([0, 0, 0], 0.0)))
    assert res.solution == [0, 0, 0] and res.value == 0.0 and res.proven


def test_node_limit_reports_unproven():
    n, bound, evaluate = knapsack([-1.0] * 14, [1] * 14, 7, (0, 1, 0.0))
    res = solve(BnbProblem(n, lambda p: -100.0, evaluate, node_limit=10))
    assert not res.proven and res.status == "limit"
    assert res.nodes <= 11
    assert res.bound <= res.value


def test_infeasible_root():
    res = solve(BnbProblem(3, lambda p: None, lambda x: 0.0))
    assert res.status == "infeasible" and res.solution is None


def test_all_leaves_infeasible():
    res = solve(BnbProblem(3, lambda p: 0.0, lambda x: None))
    assert res.status == "infeasible" and res.proven


def test_zero_variables():
    res = solve(BnbProblem(0, lambda p: 0.0, lambda x: 4.0))
    assert res.solution == [] and res.value == 4.0


def test_bad_order_rejected():
    with pytest.raises(ValueError):
        solve(BnbProblem(3, lambda p: 0.0, lambda x: 0.0, order=[0, 0, 1]))


def test_hooks_see_every_fix():
    live = {}
    n, bound, evaluate = knapsack([-1.0, 2.0, -3.0, 1.0], [1, 1, 1, 1], 2, (0, 2, 1.0))

    def on_fix(j, v):
        live[j] = v

    def on_unfix(j):
        del live[j]

    def checked_bound(p):
        assert {j: v for j, v in enumerate(p) if v is not None} == live
        return bound(p)

    solve(BnbProblem(n, checked_bound, evaluate, on_fix=on_fix, on_unfix=on_unfix))
    assert live == {}
