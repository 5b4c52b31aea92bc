import functools

import pytest

from feedopt.cli import run_pipeline
from feedopt.dameta import DAParams
from feedopt.gen import ScenarioSpec, generate
from feedopt.laygraph import build


def make_instance(customers=12, seed=0, **kw):
    kw.setdefault("fleet", (2, 2))
    return generate(ScenarioSpec(customers=customers, seed=seed, **kw))


FAST = DAParams(iter_max=300, n_stagnant=3, init_tries=20, init_tries_retry=100)


def quick_solve(inst, seed=0, params=FAST, **kw):
    kw.setdefault("assign_node_limit", 2000)
    kw.setdefault("postopt_node_limit", 2000)
    return run_pipeline(inst, seed=seed, params=params, **kw)


@functools.lru_cache(maxsize=None)
def solved_case(customers, seed, profile="peak"):
    """Cached (instance, graph, solution) triple shared across test modules."""
    inst = make_instance(customers, seed, profile=profile)
    graph = build(inst)
    sol, _ = quick_solve(inst, seed=seed)
    return inst, graph, sol


@pytest.fixture(scope="session")
def small_case():
    return solved_case(12, 3)


@pytest.fixture(scope="session")
def medium_case():
    return solved_case(40, 5, "offpeak")


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=str):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
