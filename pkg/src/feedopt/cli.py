"""Command-line front end: generate, assign, solve, tune-rho, postopt, export-milp, validate, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from typing import Dict, List, Optional, Sequence, Tuple

from .assign import Assignment, assign_flat, assign_layered, tune_rho
from .dameta import DAParams, solve as da_solve
from .gen import ScenarioSpec, generate, kpis
from .laygraph import build
from .milpio import (LPFormatError, build_full, build_second_stage, check_solution, dumps_lp, read_lp,
                     read_values, solution_values, write_atomic, write_values)
from .model import (StructuralError, dumps, instance_from_dict, instance_to_dict, solution_from_dict,
                    solution_to_dict, validate)
from .postopt import post_optimize, state_from_solution

log = logging.getLogger("feedopt")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- pipeline

def run_pipeline(inst, graph=None, *, seed: int = 0, params: Optional[DAParams] = None, rho=0.2,
                 layered: bool = True, assign_node_limit: Optional[int] = 20000,
                 assign_time_limit: Optional[float] = None, postopt: bool = True,
                 postopt_time_limit: float = 30.0, postopt_node_limit: Optional[int] = 20000,
                 runs: int = 1, progress=None):
    """Assignment, metaheuristic and post-optimization; best of ``runs`` seeds.

    Returns (solution, info) where info holds the assignment and per-run objectives.
    """
    graph = graph or build(inst)
    if layered:
        asg = assign_layered(graph, inst, rho, time_limit=assign_time_limit, node_limit=assign_node_limit)
    else:
        asg = assign_flat(graph, inst, rho, time_limit=assign_time_limit)
    best = None
    per_run = []
    for x in range(runs):
        s = seed + x
        sol, search, state = da_solve(inst, graph, asg, params, s, progress=progress)
        if postopt:
            sol = post_optimize(search, state, postopt_time_limit, node_limit=postopt_node_limit).solution
        sol.meta["seed"] = s
        per_run.append(sol.objective)
        if best is None or sol.objective < best.objective - 1e-9:
            best = sol
    best.meta["kpis"] = kpis(best, inst, graph)
    best.meta["runs"] = per_run
    return best, {"assignment": asg, "objectives": per_run, "graph": graph}


# ---------------------------------------------------------------- io helpers

def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _load_instance(path: str):
    try:
        return instance_from_dict(_load_json(path))
    except (KeyError, TypeError, ValueError, StructuralError) as exc:
        raise UsageError(f"{path}: not a valid instance ({exc})") from None


def _load_solution(path: str):
    try:
        return solution_from_dict(_load_json(path))
    except (KeyError, TypeError, ValueError, StructuralError) as exc:
        raise UsageError(f"{path}: not a valid solution ({exc})") from None


def _emit(text: str, path: Optional[str]):
    if path and path != "-":
        write_atomic(path, text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _rho(args) -> object:
    if getattr(args, "rho_file", None):
        data = _load_json(args.rho_file)
        if isinstance(data, dict) and "rho" in data:
            data = data["rho"]
        if isinstance(data, dict):
            return {int(k): float(v) for k, v in data.items()}
        if isinstance(data, list):
            return [float(v) for v in data]
        return float(data)
    return args.rho


def _params(args) -> DAParams:
    kw = {}
    for flag, name in (("iters", "iter_max"), ("tmax", "t_max"), ("tred", "t_red"), ("nimp", "n_imp"),
                       ("nstagnant", "n_stagnant")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    try:
        return DAParams(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _table(rows: List[Dict[str, object]], fmt: str) -> str:
    if fmt == "json":
        return dumps({"rows": rows})
    cols = list(rows[0]) if rows else []
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def cell(v):
        return f"{v:.2f}" if isinstance(v, float) else str(v)

    width = {c: max(len(c), *(len(cell(r[c])) for r in rows)) for c in cols}
    out = ["  ".join(c.rjust(width[c]) for c in cols)]
    for r in rows:
        out.append("  ".join(cell(r[c]).rjust(width[c]) for c in cols))
    return "\n".join(out)


# ---------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    d = _load_json(args.spec) if args.spec else {}
    for key in ("customers", "seed", "geometry", "profile"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.fleet:
        d["fleet"] = args.fleet
    try:
        spec = ScenarioSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad scenario spec: {exc}") from None
    report: dict = {}
    inst = generate(spec, report)
    if report["unreachable_requests"]:
        log.warning("%d requests have no meeting point within walking distance",
                    len(report["unreachable_requests"]))
    _emit(dumps(instance_to_dict(inst)), args.output)
    return EXIT_OK


def cmd_assign(args) -> int:
    inst = _load_instance(args.instance)
    g = build(inst)
    t0 = time.perf_counter()
    if args.flat:
        asg = assign_flat(g, inst, _rho(args), time_limit=args.time_limit)
    else:
        asg = assign_layered(g, inst, _rho(args), time_limit=args.time_limit, node_limit=args.node_limit)
    log.info("assignment value %.6f in %.2fs", asg.value, time.perf_counter() - t0)
    d = asg.to_dict()
    d["value"] = asg.value
    _emit(dumps(d), args.output)
    return EXIT_OK


def _progress_writer(path: Optional[str]):
    if not path:
        return None, None
    fh = open(path, "w")

    def cb(d):
        fh.write(json.dumps(d, sort_keys=True) + "\n")

    return cb, fh


def cmd_solve(args) -> int:
    inst = _load_instance(args.instance)
    g = build(inst)
    cb, fh = _progress_writer(args.progress)
    try:
        sol, info = run_pipeline(inst, g, seed=args.seed, params=_params(args), rho=_rho(args),
                                 layered=not args.flat, postopt=not args.no_postopt,
                                 postopt_time_limit=args.time_limit_postopt, runs=args.runs, progress=cb)
    finally:
        if fh:
            fh.close()
    viol = validate(sol, inst, g)
    _emit(dumps(solution_to_dict(sol)), args.output)
    if args.report:
        _emit(_table([dict(name=inst.name, objective=sol.objective, **sol.meta["kpis"])], args.format),
              args.report)
    if viol:
        log.error("solution violates %d constraints, first: %s", len(viol), viol[0])
        return EXIT_INVALID
    return EXIT_OK


def cmd_tune_rho(args) -> int:
    inst = _load_instance(args.instance)
    g = build(inst)
    params = _params(args)

    def evaluate(vec):
        sol, _ = run_pipeline(inst, g, seed=args.seed, params=params, rho=vec, postopt=not args.no_postopt)
        bad = sorted({g.layer_of_request[r] for r, k in enumerate(sol.served_requests()) if k is None})
        log.info("rho evaluation: objective %.4f, layers with unserved %s", sol.objective, bad)
        return sol.objective, bad

    vec = tune_rho(inst, g, evaluate, budget=args.budget)
    _emit(dumps({"rho": {str(k): v for k, v in sorted(vec.items())}}), args.output)
    return EXIT_OK


def cmd_postopt(args) -> int:
    inst = _load_instance(args.instance)
    sol = _load_solution(args.solution)
    g = build(inst)
    try:
        search, state = state_from_solution(inst, g, sol)
    except ValueError as exc:
        log.error("cannot load solution: %s", exc)
        return EXIT_INVALID
    res = post_optimize(search, state, args.time_limit_postopt)
    out = res.solution
    out.meta["kpis"] = kpis(out, inst, g)
    viol = validate(out, inst, g)
    _emit(dumps(solution_to_dict(out)), args.output)
    log.info("post-optimization: %.4f -> %.4f", sol.objective, out.objective)
    return EXIT_INVALID if viol else EXIT_OK


def cmd_export_milp(args) -> int:
    inst = _load_instance(args.instance)
    g = build(inst)
    sol = _load_solution(args.solution) if args.solution else None
    if args.model == "full":
        model = build_full(inst, g)
    else:
        if sol is not None:
            mp_of = sol.mp_of_request
        else:
            mp_of = assign_layered(g, inst, _rho(args), node_limit=20000).mp_of_request
        model = build_second_stage(inst, g, mp_of)
    _emit(dumps_lp(model), args.output)
    if args.values:
        if sol is None:
            raise UsageError("--values needs --solution")
        vals = solution_values(sol, inst, g, model)
        buf = io.StringIO()
        write_values(vals, buf)
        _emit(buf.getvalue(), args.values)
        rep = check_solution(model, vals)
        log.info("encoded solution: %d violations, objective %.6f", len(rep.violations), rep.objective)
        if not rep.ok:
            return EXIT_INVALID
    return EXIT_OK


def cmd_check_milp(args) -> int:
    try:
        model = read_lp(args.model)
        rep = check_solution(model, args.values)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except LPFormatError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    _emit(dumps(rep.to_dict()), args.output)
    return EXIT_OK if rep.ok else EXIT_INVALID


def cmd_validate(args) -> int:
    inst = _load_instance(args.instance)
    sol = _load_solution(args.solution)
    g = build(inst)
    viol = validate(sol, inst, g)
    _emit(dumps({"ok": not viol, "violations": viol}), args.output)
    return EXIT_INVALID if viol else EXIT_OK


def cmd_report(args) -> int:
    inst = g = None
    if args.instance:
        inst = _load_instance(args.instance)
        g = build(inst)
    rows = []
    for path in args.solutions:
        sol = _load_solution(path)
        if g is not None:
            k = kpis(sol, inst, g)
        elif "kpis" in sol.meta:
            k = sol.meta["kpis"]
        else:
            raise UsageError(f"{path} carries no KPIs; pass --instance")
        rows.append(dict(solution=os.path.basename(path), objective=sol.objective, **k))
    if len(rows) > 1:
        mean = {"solution": "mean"}
        for c in rows[0]:
            if c != "solution":
                mean[c] = sum(float(r[c]) for r in rows) / len(rows)
        rows.append(mean)
    _emit(_table(rows, args.format), args.output)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_format(p):
    p.add_argument("--format", choices=("json", "table", "csv"), default="table", help="report format")


def _add_rho(p):
    p.add_argument("--rho", type=float, default=0.2, help="walking/travel trade-off for the assignment")
    p.add_argument("--rho-file", help="JSON with a number, a per-layer list or a {layer: rho} map")


def _add_da(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, help="maximum iterations (default 100000)")
    p.add_argument("--tmax", type=float, help="maximum threshold factor (default 2.1)")
    p.add_argument("--tred", type=int, help="threshold reduction steps (default 200)")
    p.add_argument("--nimp", type=int, help="non-improving iterations before restart (default 100)")
    p.add_argument("--nstagnant", type=int,
                   help="stop after this many 100-iteration windows without improvement (default 200)")


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feedopt", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="create an instance from a scenario spec")
    p.add_argument("spec", nargs="?", help="scenario spec JSON (defaults if omitted)")
    p.add_argument("--customers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--geometry", choices=("grid", "ring"))
    p.add_argument("--profile", choices=("peak", "offpeak"))
    p.add_argument("--fleet", type=int, nargs=2, metavar=("SMALL", "LARGE"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("assign", help="customer-to-meeting-point assignment")
    p.add_argument("instance")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--layered", dest="flat", action="store_false", help="per-layer model (default)")
    g.add_argument("--flat", dest="flat", action="store_true", help="single model over all layers")
    _add_rho(p)
    p.add_argument("--time-limit", type=float)
    p.add_argument("--node-limit", type=int, default=20000)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("solve", help="full pipeline: assign, route and charge, post-optimize")
    p.add_argument("instance")
    _add_da(p)
    _add_rho(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--layered", dest="flat", action="store_false")
    g.add_argument("--flat", dest="flat", action="store_true")
    p.add_argument("--runs", type=int, default=1, help="best of this many consecutive seeds")
    p.add_argument("--time-limit-postopt", type=float, default=30.0)
    p.add_argument("--no-postopt", action="store_true")
    p.add_argument("--progress", help="write progress records (JSON lines) here")
    p.add_argument("--report", help="write the KPI report here")
    _add_format(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("tune-rho", help="search the assignment trade-off per layer")
    p.add_argument("instance")
    _add_da(p)
    p.add_argument("--budget", type=int, default=15)
    p.add_argument("--no-postopt", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_tune_rho)

    p = sub.add_parser("postopt", help="post-optimize a stored solution")
    p.add_argument("instance")
    p.add_argument("solution")
    p.add_argument("--time-limit-postopt", type=float, default=30.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_postopt)

    p = sub.add_parser("export-milp", help="write the full or second-stage model as an LP file")
    p.add_argument("instance")
    p.add_argument("--model", choices=("full", "second-stage"), default="full")
    p.add_argument("--solution", help="solution providing the assignment and/or variable values")
    p.add_argument("--values", help="write the solution's variable assignment here")
    _add_rho(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export_milp)

    p = sub.add_parser("check-milp", help="check a variable assignment against an LP file")
    p.add_argument("model")
    p.add_argument("values")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_check_milp)

    p = sub.add_parser("validate", help="check a solution against every model constraint")
    p.add_argument("instance")
    p.add_argument("solution")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="KPI table over solutions")
    p.add_argument("solutions", nargs="+")
    p.add_argument("--instance", help="recompute KPIs against this instance")
    _add_format(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("FEEDOPT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    ap = parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"feedopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
