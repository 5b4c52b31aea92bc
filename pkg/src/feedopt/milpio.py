"""MILP models as LP files, an LP reader, solution encoding and constraint checking.

Two models are emitted: the full routing, assignment and charging model over
the layered graph, and the second-stage routing model for a fixed
customer-to-meeting-point assignment. Indicator constraints are linearised
with big-M terms. The file format is the CPLEX LP dialect described in
``docs/lp_format.md``; numbers are printed with 12 significant digits and
objective constants are carried by a variable fixed to one.

The module also holds an exact oracle for tiny instances: branch-and-bound
over the model's assignment variables with exhaustive route ordering.
"""

from __future__ import annotations

import io
import itertools
import math
import os
import random
import re
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from . import bnb
from .model import Instance, Solution

CONST = "ONE_VAR_CONSTANT"
FMT = "{:.12g}"
TOL = 1e-6


class LPFormatError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class MilpModel:
    name: str
    variables: Dict[str, Tuple[str, float, float]] = field(default_factory=dict)   # name -> (B|C, lb, ub)
    constraints: List[Tuple[str, Dict[str, float], str, float]] = field(default_factory=list)
    objective: Dict[str, float] = field(default_factory=dict)

    # -------------------------------------------------------- building
    def var(self, name: str, kind: str = "C", lb: float = 0.0, ub: float = math.inf) -> str:
        if name not in self.variables:
            self.variables[name] = (kind, lb, ub) if kind == "C" else ("B", 0.0, 1.0)
        return name

    def add(self, name: str, terms: Iterable[Tuple[float, str]], sense: str, rhs: float):
        row: Dict[str, float] = {}
        for c, v in terms:
            if c != 0:
                row[v] = row.get(v, 0.0) + c
        self.constraints.append((name, row, sense, float(rhs)))

    def obj(self, coef: float, name: str):
        if coef != 0:
            self.objective[name] = self.objective.get(name, 0.0) + coef

    # -------------------------------------------------------- evaluation
    def evaluate(self, values: Dict[str, float]) -> float:
        return sum(c * values.get(v, 0.0) for v, c in self.objective.items())

    def family_counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for name, *_ in self.constraints:
            fam = name.split("_", 1)[0]
            out[fam] = out.get(fam, 0) + 1
        return out


# ---------------------------------------------------------------- shared data

class _Data:
    def __init__(self, inst: Instance, graph, nodes: Optional[Sequence[int]] = None):
        g = graph
        self.inst, self.g = inst, g
        keep = set(nodes) if nodes is not None else set(range(g.n_nodes))
        self.keep = keep
        self.N0, self.N1 = g.depot_start, g.depot_end
        self.mps = [n for n in range(g.n_nodes) if g.kind[n] == "mp" and n in keep]
        self.stations = [n for n in range(g.n_nodes) if g.kind[n] == "station" and n in keep]
        self.chargers = [n for n in range(g.n_nodes) if g.kind[n] == "charger" and n in keep]
        self.V = self.mps + self.stations + self.chargers
        self.arcs = [(i, j) for i, j in g.arcs() if i in keep and j in keep]
        self.out: Dict[int, List[int]] = {}
        self.inn: Dict[int, List[int]] = {}
        for i, j in self.arcs:
            self.out.setdefault(i, []).append(j)
            self.inn.setdefault(j, []).append(i)
        self.K = range(len(inst.vehicles))
        T = inst.horizon
        tmax = max((g.t(i, j) for i, j in self.arcs), default=0.0)
        cmax = max((g.c(i, j) for i, j in self.arcs), default=0.0)
        self.M1 = max(1, len(inst.requests))
        # the horizon alone does not cover B_i + u + t near the end of the day
        self.Mt = 2.0 * T + tmax + inst.service_time
        amax = max((c.rate for c in inst.chargers), default=0.0)
        self.ME = [v.e_max + v.consumption * cmax + amax * T for v in inst.vehicles]
        gsum = sum(r.passengers for r in inst.requests)
        self.Mq = [v.capacity + gsum for v in inst.vehicles]
        self.T = T

    def kind(self, n):
        return self.g.kind[n]


def _x(i, j, k):
    return f"x_{i}_{j}_{k}"


def _y(r, i, k):
    return f"y_{r}_{i}_{k}"


def _n(sym, i, k):
    return f"{sym}_{i}_{k}"


def _declare_routing(m: MilpModel, d: _Data):
    g, inst = d.g, d.inst
    for k in d.K:
        v = inst.vehicles[k]
        for i, j in d.arcs:
            m.var(_x(i, j, k), "B")
        for n in [d.N0] + d.V + [d.N1]:
            m.var(_n("B", n, k), "C", g.e[n], g.l[n])
            m.var(_n("q", n, k), "C", 0.0, float(v.capacity))
            m.var(_n("E", n, k), "C", v.e_min, v.e_max)
        for n in d.stations:
            m.var(_n("A", n, k), "C", 0.0, d.T)
            m.var(_n("W", n, k), "C", 0.0, d.T)
            m.var(_n("p", n, k), "B")
        for s in d.chargers:
            m.var(_n("tau", s, k), "C", 0.0, d.T)
    for s in d.chargers:
        m.var(f"v_{s}", "B")


def _routing_constraints(m: MilpModel, d: _Data, mp_visit_once_fleet: bool):
    """Flow, time, energy and charger constraints shared by both models."""
    g, inst = d.g, d.inst
    N0, N1 = d.N0, d.N1
    Mt = d.Mt
    for k in d.K:
        m.add(f"depotout_{k}", [(1, _x(N0, j, k)) for j in d.out.get(N0, [])], "=", 1)
        m.add(f"depotin_{k}", [(1, _x(i, N1, k)) for i in d.inn.get(N1, [])], "=", 1)
        if not mp_visit_once_fleet:
            for j in d.mps:
                m.add(f"visit_{j}_{k}", [(1, _x(i, j, k)) for i in d.inn.get(j, [])], "<=", 1)
        for j in d.V:
            terms = [(1, _x(i, j, k)) for i in d.inn.get(j, [])] + [(-1, _x(j, i, k)) for i in d.out.get(j, [])]
            m.add(f"flow_{j}_{k}", terms, "=", 0)
    if mp_visit_once_fleet:
        for j in d.mps:
            m.add(f"visit_{j}", [(1, _x(i, j, k)) for k in d.K for i in d.inn.get(j, [])], "<=", 1)

    for k in d.K:
        v = inst.vehicles[k]
        for i, j in d.arcs:
            x = _x(i, j, k)
            t = g.t(i, j)
            c = g.c(i, j)
            # time propagation (service time of chargers is zero)
            m.add(f"time_{i}_{j}_{k}", [(1, _n("B", j, k)), (-1, _n("B", i, k)), (-Mt, x)], ">=", g.u[i] + t - Mt)
            if d.kind(i) == "charger":
                m.add(f"chtime_{i}_{j}_{k}", [(1, _n("B", j, k)), (-1, _n("B", i, k)), (-1, _n("tau", i, k)),
                                              (-Mt, x)], ">=", t - Mt)
            if d.kind(j) == "station" and d.kind(i) in ("mp", "station"):
                a = [(1, _n("A", j, k)), (-1, _n("B", i, k))]
                m.add(f"arrup_{i}_{j}_{k}", a + [(Mt, x)], "<=", t + g.u[i] + Mt)
                m.add(f"arrlo_{i}_{j}_{k}", a + [(-Mt, x)], ">=", t + g.u[i] - Mt)
            # energy
            ME = d.ME[k]
            if d.kind(i) == "charger":
                rate = inst.chargers[g.charger_index[i]].rate
                e = [(1, _n("E", j, k)), (-1, _n("E", i, k)), (-rate, _n("tau", i, k))]
            else:
                e = [(1, _n("E", j, k)), (-1, _n("E", i, k))]
            m.add(f"enup_{i}_{j}_{k}", e + [(ME, x)], "<=", -v.consumption * c + ME)
            m.add(f"enlo_{i}_{j}_{k}", e + [(-ME, x)], ">=", -v.consumption * c - ME)
        for n in d.stations:
            m.add(f"wait_{n}_{k}", [(1, _n("W", n, k)), (-1, _n("B", n, k)), (1, _n("A", n, k)),
                                    (-Mt, _n("p", n, k))], ">=", -Mt)
            m.add(f"pvis_{n}_{k}", [(1, _n("p", n, k))] + [(-1, _x(i, n, k)) for i in d.inn.get(n, [])], "=", 0)
        m.add(f"einit_{k}", [(1, _n("E", N0, k))], "=", v.e_init)
        for s in d.chargers:
            m.add(f"chzero_{s}_{k}", [(1, _n("tau", s, k)), (1, _n("B", s, k))] +
                  [(-Mt, _x(s, j, k)) for j in d.out.get(s, [])], "<=", 0)

    for s in d.chargers:
        m.add(f"chvis_{s}", [(1, f"v_{s}")] + [(-1, _x(s, j, k)) for k in d.K for j in d.out.get(s, [])], "=", 0)
        m.add(f"chonce_{s}", [(1, f"v_{s}")], "<=", 1)
    for o, ids in enumerate(g.charger_dummies):
        ids = [s for s in ids if s in d.keep]
        for h, l in itertools.combinations(sorted(ids), 2):
            m.add(f"chorder_{h}_{l}", [(1, f"v_{h}"), (-1, f"v_{l}")], "<=", 0)
            terms = ([(1, _n("B", h, k)) for k in d.K] + [(-1, _n("B", l, k)) for k in d.K] +
                     [(-1, _n("tau", l, k)) for k in d.K] + [(-Mt, f"v_{h}"), (-Mt, f"v_{l}")])
            m.add(f"chsync_{h}_{l}", terms, ">=", -2 * Mt)


def _routing_objective(m: MilpModel, d: _Data):
    w = d.inst.weights
    for k in d.K:
        for i, j in d.arcs:
            m.obj(w.lambda1 * d.g.t(i, j), _x(i, j, k))
        for s in d.chargers:
            m.obj(w.lambda1, _n("tau", s, k))
        for n in d.stations:
            m.obj(w.lambda3, _n("W", n, k))


def _walk_dist(inst: Instance, r: int, mp: int) -> Tuple[float, float]:
    for j, dd, tw in inst.requests[r].reachable:
        if j == mp:
            return dd, tw
    raise KeyError((r, mp))


def build_full(inst: Instance, graph) -> MilpModel:
    """Full model: assignment, routing, energy and charger synchronisation."""
    d = _Data(inst, graph)
    g = graph
    m = MilpModel(inst.name or "full")
    _declare_routing(m, d)
    walk = [(r, i, tw) for r, i, tw in g.walk_arcs]
    for k in d.K:
        for r, i, _ in walk:
            m.var(_y(r, i, k), "B")
    m.var(CONST, "C", 1.0, 1.0)

    w = inst.weights
    _routing_objective(m, d)
    for k in d.K:
        for r, i, tw in walk:
            m.obj(w.lambda2 * tw - w.omega, _y(r, i, k))
    m.obj(w.omega * len(inst.requests), CONST)

    by_req: Dict[int, List[int]] = {}
    by_mp: Dict[int, List[int]] = {}
    for r, i, _ in walk:
        by_req.setdefault(r, []).append(i)
        by_mp.setdefault(i, []).append(r)
    for r in range(len(inst.requests)):
        opts = by_req.get(r, [])
        m.add(f"once_{r}", [(1, _y(r, i, k)) for k in d.K for i in opts], "<=", 1)
        m.add(f"walkmax_{r}", [(_walk_dist(inst, r, g.mp_index[i])[0], _y(r, i, k)) for k in d.K for i in opts],
              "<=", inst.max_walk)
    _routing_constraints(m, d, mp_visit_once_fleet=False)
    for k in d.K:
        for i in d.mps:
            rs = by_mp.get(i, [])
            m.add(f"link_{i}_{k}", [(1, _y(r, i, k)) for r in rs] + [(-d.M1, _x(i, j, k)) for j in d.out.get(i, [])],
                  "<=", 0)
        for r, i, _ in walk:
            st = g.station_node_of_layer[g.layer_of_request[r]]
            inflow = [(1, _x(j, i, k)) for j in d.inn.get(i, [])]
            sflow = [(-1, _x(j, st, k)) for j in d.inn.get(st, []) if d.kind(j) in ("mp", "station")]
            y = _y(r, i, k)
            m.add(f"samelo_{r}_{i}_{k}", inflow + sflow + [(-d.M1, y)], ">=", -d.M1)
            m.add(f"sameup_{r}_{i}_{k}", inflow + sflow + [(d.M1, y)], "<=", d.M1)
            m.add(f"ride_{r}_{i}_{k}", [(1, _n("A", st, k)), (-1, _n("B", i, k)), (d.Mt, y)], "<=",
                  g.ride_limit[i] + g.u[i] + d.Mt)
        _load_constraints(m, d, k, {i: [(inst.requests[r].passengers, _y(r, i, k)) for r in by_mp.get(i, [])]
                                    for i in d.mps})
    return m


def _load_constraints(m: MilpModel, d: _Data, k: int, pickup: Dict[int, List[Tuple[float, str]]],
                      const: Optional[Dict[int, float]] = None):
    """Load grows by the pickups at a meeting point and resets to zero at the station."""
    Mq = d.Mq[k]
    for i, j in d.arcs:
        x = _x(i, j, k)
        if d.kind(j) == "mp":
            base = [(1, _n("q", j, k)), (-1, _n("q", i, k))]
            if const is not None:
                rhs = const.get(j, 0.0)
                m.add(f"loadup_{i}_{j}_{k}", base + [(Mq, x)], "<=", rhs + Mq)
                m.add(f"loadlo_{i}_{j}_{k}", base + [(-Mq, x)], ">=", rhs - Mq)
            else:
                pk = [(-c, v) for c, v in pickup.get(j, [])]
                m.add(f"loadup_{i}_{j}_{k}", base + pk + [(Mq, x)], "<=", Mq)
                m.add(f"loadlo_{i}_{j}_{k}", base + pk + [(-Mq, x)], ">=", -Mq)
        elif d.kind(j) == "station" and d.kind(i) == "mp":
            m.add(f"drop_{i}_{j}_{k}", [(1, _n("q", j, k)), (Mq, x)], "<=", Mq)


def build_second_stage(inst: Instance, graph, mp_of_request: Sequence[Optional[int]]) -> MilpModel:
    """Routing model for a fixed assignment over the assigned meeting points only."""
    g = graph
    load: Dict[int, float] = {}
    for r, i in enumerate(mp_of_request):
        if i is not None:
            load[i] = load.get(i, 0.0) + inst.requests[r].passengers
    used = sorted(load)
    stations = sorted({g.station_node_of_layer[g.layer_of_node[i]] for i in used})
    chargers = [n for ids in g.charger_dummies for n in ids]
    d = _Data(inst, graph, [g.depot_start, g.depot_end] + used + stations + chargers)
    m = MilpModel((inst.name or "model") + "-second-stage")
    _declare_routing(m, d)
    m.var(CONST, "C", 1.0, 1.0)
    w = inst.weights
    _routing_objective(m, d)
    # unserved penalty on the passengers waiting at each meeting point
    for i in used:
        for j in d.out.get(i, []):
            if d.kind(j) in ("mp", "station"):
                for k in d.K:
                    m.obj(-w.omega * load[i], _x(i, j, k))
    m.obj(w.omega * sum(load.values()), CONST)
    _routing_constraints(m, d, mp_visit_once_fleet=True)
    for k in d.K:
        for i in used:
            st = g.station_node_of_layer[g.layer_of_node[i]]
            inflow = [(1, _x(j, i, k)) for j in d.inn.get(i, [])]
            sflow = [(-1, _x(j, st, k)) for j in d.inn.get(st, [])]
            m.add(f"samebus_{i}_{k}", inflow + sflow, "<=", 0)
            ab = [(1, _n("A", st, k)), (-1, _n("B", i, k))]
            m.add(f"after_{i}_{k}", ab + [(-d.Mt, x) for _, x in inflow], ">=", g.t(i, st) + g.u[i] - d.Mt)
            m.add(f"ride_{i}_{k}", ab + [(d.Mt, x) for _, x in inflow], "<=", g.ride_limit[i] + g.u[i] + d.Mt)
        _load_constraints(m, d, k, {}, const=load)
    return m


# ---------------------------------------------------------------- LP text format

def _term(c: float, v: str) -> str:
    return ("- " if c < 0 else "+ ") + FMT.format(abs(c)) + " " + v


def _wrap(head: str, parts: List[str], tail: str, width: int = 240) -> List[str]:
    lines, cur = [], " " + head
    for p in parts + ([tail] if tail else []):
        if len(cur) + len(p) + 1 > width:
            lines.append(cur)
            cur = "   " + p
        else:
            cur += " " + p
    lines.append(cur)
    return lines


def write_lp(model: MilpModel, fh: io.TextIOBase):
    fh.write(f"\\ model {model.name}\n")
    fh.write("Minimize\n")
    obj = [_term(c, v) for v, c in model.objective.items()] or ["+ 0 " + CONST]
    fh.write("\n".join(_wrap("obj:", obj, "")) + "\n")
    fh.write("Subject To\n")
    for name, row, sense, rhs in model.constraints:
        parts = [_term(c, v) for v, c in row.items()] or ["+ 0 " + CONST]
        fh.write("\n".join(_wrap(name + ":", parts, f"{sense} {FMT.format(rhs)}")) + "\n")
    fh.write("Bounds\n")
    bins = []
    for v, (kind, lb, ub) in model.variables.items():
        if kind == "B":
            bins.append(v)
        elif lb == ub:
            fh.write(f" {v} = {FMT.format(lb)}\n")
        else:
            hi = "+inf" if math.isinf(ub) else FMT.format(ub)
            fh.write(f" {FMT.format(lb)} <= {v} <= {hi}\n")
    if bins:
        fh.write("Binaries\n")
        for p in range(0, len(bins), 8):
            fh.write(" " + " ".join(bins[p:p + 8]) + "\n")
    fh.write("End\n")


def write_atomic(path: str, text: str):
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_lp(model: MilpModel) -> str:
    buf = io.StringIO()
    write_lp(model, buf)
    return buf.getvalue()


def export_full(inst: Instance, graph, path: str) -> MilpModel:
    m = build_full(inst, graph)
    write_atomic(path, dumps_lp(m))
    return m


def export_second_stage(inst: Instance, graph, mp_of_request, path: str) -> MilpModel:
    m = build_second_stage(inst, graph, mp_of_request)
    write_atomic(path, dumps_lp(m))
    return m


_SECTIONS = {"minimize": "obj", "minimum": "obj", "min": "obj", "subject to": "st", "such that": "st",
             "st": "st", "s.t.": "st", "bounds": "bounds", "binaries": "bin", "binary": "bin",
             "bin": "bin", "generals": "gen", "general": "gen", "end": "end"}
_NUM = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$|^[+-]?inf(inity)?$", re.I)


def _num(tok: str, line: int) -> float:
    if not _NUM.match(tok):
        raise LPFormatError(f"expected a number, got {tok!r}", line)
    return float(tok)


def _parse_expr(tokens: List[Tuple[str, int]]) -> Tuple[Dict[str, float], List[Tuple[str, int]]]:
    """Linear expression up to a relational operator; returns terms and remaining tokens."""
    row: Dict[str, float] = {}
    sign, coef = 1.0, None
    p = 0
    while p < len(tokens):
        tok, ln = tokens[p]
        if tok in ("<=", ">=", "=", "<", ">", "=<", "=>"):
            break
        if tok in ("+", "-"):
            sign = sign * (-1.0 if tok == "-" else 1.0)
        elif _NUM.match(tok):
            coef = float(tok)
        else:
            if not re.match(r"^[A-Za-z_][\w.\[\]]*$", tok):
                raise LPFormatError(f"bad variable name {tok!r}", ln)
            row[tok] = row.get(tok, 0.0) + sign * (1.0 if coef is None else coef)
            sign, coef = 1.0, None
        p += 1
    return row, tokens[p:]


def _statements(lines: List[Tuple[str, int]]) -> List[List[Tuple[str, int]]]:
    """Split a section into statements; a new one starts at a token ending in ':'."""
    out: List[List[Tuple[str, int]]] = []
    for text, ln in lines:
        for tok in re.findall(r"<=|>=|=<|=>|[<>=]|[^\s<>=]+", text):
            if tok.endswith(":"):
                out.append([(tok, ln)])
            elif not out:
                out.append([(tok, ln)])
            else:
                out[-1].append((tok, ln))
    return out


def _split_signs(tokens: List[Tuple[str, int]]) -> List[Tuple[str, int]]:
    out = []
    for tok, ln in tokens:
        if len(tok) > 1 and tok[0] in "+-" and not _NUM.match(tok):
            out.append((tok[0], ln))
            out.append((tok[1:], ln))
        else:
            out.append((tok, ln))
    return out


def read_lp(source: Union[str, io.TextIOBase]) -> MilpModel:
    """Parse the LP subset written by ``write_lp`` (also accepts most hand-written files)."""
    text = source.read() if hasattr(source, "read") else open(source).read()
    sections: Dict[str, List[Tuple[str, int]]] = {k: [] for k in ("obj", "st", "bounds", "bin", "gen")}
    cur = None
    name = "model"
    seen_end = False
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("\\", 1)[0].strip() if not raw.lstrip().startswith("\\ model") else ""
        if raw.lstrip().startswith("\\ model"):
            name = raw.strip()[len("\\ model"):].strip() or name
            continue
        if not line:
            continue
        key = line.lower()
        if key in _SECTIONS:
            cur = _SECTIONS[key]
            if cur == "end":
                seen_end = True
                break
            continue
        if cur is None:
            raise LPFormatError("content before the objective section", ln)
        sections[cur].append((line, ln))
    if not seen_end:
        raise LPFormatError("missing End", len(text.splitlines()))
    m = MilpModel(name)
    declared: Dict[str, Tuple[str, float, float]] = {}

    def touch(v):
        if v not in declared:
            declared[v] = ("C", 0.0, math.inf)

    for st in _statements(sections["obj"]):
        toks = _split_signs(st[1:] if st[0][0].endswith(":") else st)
        row, rest = _parse_expr(toks)
        if rest:
            raise LPFormatError("relational operator in objective", rest[0][1])
        for v, c in row.items():
            m.obj(c, v)
            touch(v)
    for st in _statements(sections["st"]):
        if not st[0][0].endswith(":"):
            raise LPFormatError("constraint without a name", st[0][1])
        cname = st[0][0][:-1]
        row, rest = _parse_expr(_split_signs(st[1:]))
        if len(rest) != 2:
            raise LPFormatError(f"malformed constraint {cname!r}", st[0][1])
        op = {"<": "<=", "=<": "<=", ">": ">=", "=>": ">="}.get(rest[0][0], rest[0][0])
        m.constraints.append((cname, row, op, _num(rest[1][0], rest[1][1])))
        for v in row:
            touch(v)
    for text_line, ln in sections["bounds"]:
        toks = re.findall(r"<=|>=|=<|=>|[<>=]|[^\s<>=]+", text_line)
        if len(toks) == 2 and toks[1].lower() == "free":
            declared[toks[0]] = ("C", -math.inf, math.inf)
        elif len(toks) == 3 and toks[1] == "=":
            v = _num(toks[2], ln)
            declared[toks[0]] = ("C", v, v)
        elif len(toks) == 5 and toks[1] in ("<=", "=<") and toks[3] in ("<=", "=<"):
            declared[toks[2]] = ("C", _num(toks[0], ln), _num(toks[4], ln))
        elif len(toks) == 3 and toks[1] in ("<=", ">="):
            kind, lb, ub = declared.get(toks[0], ("C", 0.0, math.inf))
            val = _num(toks[2], ln)
            declared[toks[0]] = ("C", val, ub) if toks[1] == ">=" else ("C", lb, val)
        else:
            raise LPFormatError(f"unrecognised bound {text_line!r}", ln)
    for text_line, ln in sections["bin"] + sections["gen"]:
        for v in text_line.split():
            declared[v] = ("B", 0.0, 1.0)
    m.variables = declared
    return m


# ---------------------------------------------------------------- solutions as variables

def solution_values(sol: Solution, inst: Instance, graph, model: Optional[MilpModel] = None) -> Dict[str, float]:
    """Variable assignment encoding a solution; unvisited nodes sit at feasible defaults."""
    g = graph
    vals: Dict[str, float] = {CONST: 1.0}
    visited = {k: set() for k in range(len(inst.vehicles))}
    for rp in sol.routes:
        k = rp.vehicle
        for a, b in zip(rp.nodes, rp.nodes[1:]):
            vals[_x(a, b, k)] = 1.0
        for i, n in enumerate(rp.nodes):
            if n == g.depot_start and i > 0:
                continue
            visited[k].add(n)
            vals[_n("B", n, k)] = rp.B[i]
            vals[_n("q", n, k)] = rp.q[i]
            vals[_n("E", n, k)] = rp.E[i]
            kind = g.kind[n]
            if kind == "station":
                vals[_n("A", n, k)] = rp.A[i]
                vals[_n("W", n, k)] = rp.W[i]
                vals[_n("p", n, k)] = 1.0
            elif kind == "charger":
                vals[_n("tau", n, k)] = rp.tau[i]
                vals[f"v_{n}"] = 1.0
    served = sol.served_requests()
    for r, k in enumerate(served):
        if k is not None:
            vals[_y(r, sol.mp_of_request[r], k)] = 1.0
    for k, v in enumerate(inst.vehicles):
        for n in range(g.n_nodes):
            if n in visited[k]:
                continue
            vals.setdefault(_n("B", n, k), g.e[n])
            vals.setdefault(_n("E", n, k), v.e_min)
    if model is not None:
        vals = {name: val for name, val in vals.items() if name in model.variables}
    return vals


def write_values(values: Dict[str, float], fh: io.TextIOBase):
    for name in sorted(values):
        fh.write(f"{name} {FMT.format(values[name])}\n")


def read_values(source: Union[str, io.TextIOBase]) -> Dict[str, float]:
    text = source.read() if hasattr(source, "read") else open(source).read()
    out: Dict[str, float] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LPFormatError(f"expected 'name value', got {raw!r}", ln)
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise LPFormatError(f"bad value {parts[1]!r}", ln) from None
    return out


@dataclass
class CheckReport:
    violations: List[dict]
    objective: float
    n_constraints: int
    unknown: List[str]

    @property
    def ok(self) -> bool:
        return not self.violations and not self.unknown

    def to_dict(self) -> dict:
        return {"ok": self.ok, "objective": self.objective, "n_constraints": self.n_constraints,
                "violations": self.violations, "unknown_variables": self.unknown}


def check_solution(model: MilpModel, values: Union[Dict[str, float], str, io.TextIOBase],
                   tol: float = TOL) -> CheckReport:
    """Evaluate every constraint, bound and integrality requirement; missing variables are 0."""
    if not isinstance(values, dict):
        values = read_values(values)
    unknown = sorted(v for v in values if v not in model.variables)
    viol = []
    for name, row, sense, rhs in model.constraints:
        lhs = sum(c * values.get(v, 0.0) for v, c in row.items())
        if sense == "<=":
            ex = lhs - rhs
        elif sense == ">=":
            ex = rhs - lhs
        else:
            ex = abs(lhs - rhs)
        if ex > tol:
            viol.append({"constraint": name, "lhs": lhs, "sense": sense, "rhs": rhs, "excess": ex})
    for v, (kind, lb, ub) in model.variables.items():
        x = values.get(v, 0.0)
        if x < lb - tol or x > ub + tol:
            viol.append({"constraint": f"bound:{v}", "lhs": x, "sense": "in", "rhs": [lb, ub],
                         "excess": max(lb - x, x - ub)})
        elif kind == "B" and min(abs(x), abs(x - 1)) > tol:
            viol.append({"constraint": f"integrality:{v}", "lhs": x, "sense": "in", "rhs": [0, 1],
                         "excess": min(abs(x), abs(x - 1))})
    return CheckReport(viol, model.evaluate(values), len(model.constraints), unknown)


# ---------------------------------------------------------------- exact oracle for tiny instances

class EnergyBindingError(RuntimeError):
    """The travel-optimal routes need charging, so the enumeration is not exact."""


@dataclass
class ExactResult:
    solution: Solution
    value: float
    proven: bool
    nodes: int
    check: CheckReport


def solve_exact(inst: Instance, graph, time_limit: Optional[float] = 60.0) -> ExactResult:
    """Optimum of the full model on tiny instances by branch-and-bound over its assignment variables.

    Each vehicle's route for a fixed set of meeting points is found by trying
    every visiting order. Charging is never part of the optimum when the
    travel-optimal routes are energy feasible; otherwise EnergyBindingError.
    One vehicle per meeting-point copy is assumed (splitting a stop between
    vehicles never pays off unless capacity binds).
    """
    from .assign import Assignment
    from .dameta import DAParams, Search, State, analyze
    from .evalsched import Ctx, timeline

    g = graph
    model = build_full(inst, g)
    w = inst.weights
    ctx = Ctx(inst, g, {})
    K = len(inst.vehicles)
    opts: List[Tuple[int, int, int, float]] = []     # (request, mp node, vehicle, gain)
    for r, i, tw in g.walk_arcs:
        if inst.requests[r].passengers > max(v.capacity for v in inst.vehicles):
            continue
        for k in range(K):
            opts.append((r, i, k, w.omega - w.lambda2 * tw))
    opts.sort(key=lambda o: (o[0], -o[3], o[2], o[1]))
    n = len(opts)
    by_req: Dict[int, List[int]] = {}
    for x, o in enumerate(opts):
        by_req.setdefault(o[0], []).append(x)
    route_cache: Dict[Tuple[int, frozenset], Optional[Tuple[float, List[int]]]] = {}

    def best_route(k: int, mps: frozenset) -> Optional[Tuple[float, List[int]]]:
        key = (k, mps)
        if key in route_cache:
            return route_cache[key]
        layers: Dict[int, List[int]] = {}
        for m in mps:
            layers.setdefault(g.layer_of_node[m], []).append(m)
        order = sorted(layers)
        best = None
        for combo in itertools.product(*[itertools.permutations(sorted(layers[li])) for li in order]):
            seq = []
            for li, perm in zip(order, combo):
                seq += list(perm) + [g.station_node_of_layer[li]]
            R = analyze(ctx, k, seq)
            if R is not None and (best is None or R.travel < best[0] - 1e-12):
                best = (R.travel, seq)
        route_cache[key] = best
        return best

    const = w.omega * len(inst.requests)

    def value(partial, complete: bool) -> Optional[float]:
        sets = [set() for _ in range(K)]
        load: Dict[Tuple[int, int], int] = {}     # (vehicle, layer) -> passengers
        owner: Dict[int, int] = {}
        gain = 0.0
        for r, xs in by_req.items():
            ones = [x for x in xs if partial[x] == 1]
            if len(ones) > 1:
                return None
            if ones:
                _, i, k, gn = opts[ones[0]]
                if owner.setdefault(i, k) != k:
                    return None
                sets[k].add(i)
                key = (k, g.layer_of_node[i])
                load[key] = load.get(key, 0) + inst.requests[r].passengers
                gain += gn
            elif not complete:
                free = [opts[x][3] for x in xs if partial[x] is None]
                if free:
                    gain += max(0.0, max(free))
        if any(q > inst.vehicles[k].capacity for (k, _), q in load.items()):
            return None
        travel = 0.0
        for k in range(K):
            br = best_route(k, frozenset(sets[k]))
            if br is None:
                return None
            travel += br[0]
        return const + w.lambda1 * travel - gain

    prob = bnb.BnbProblem(n, lambda p: value(p, False), lambda x: value(x, True), time_limit=time_limit,
                          prefer=1)
    res = bnb.solve(prob)
    if res.solution is None:
        raise RuntimeError("no feasible solution found")
    x = res.solution
    mp_of: List[Optional[int]] = [None] * len(inst.requests)
    sets = [set() for _ in range(K)]
    for idx, o in enumerate(opts):
        if x[idx]:
            mp_of[o[0]] = o[1]
            sets[o[2]].add(o[1])
    asg = Assignment(mp_of, sorted({m for m in mp_of if m is not None}))
    search = Search(inst, g, asg, DAParams(), random.Random(0))
    seqs = {}
    for k in range(K):
        br = best_route(k, frozenset(sets[k]))
        tl = timeline(search.ctx, k, br[1], ())
        if not tl.energy_ok:
            raise EnergyBindingError(f"vehicle {k} needs charging on its travel-optimal route")
        seqs[k] = br[1]
    state = search.rehydrate(search.empty_state(), seqs)
    sol = search.to_solution(state)
    rep = check_solution(model, solution_values(sol, inst, g))
    return ExactResult(sol, res.value, res.proven, res.nodes, rep)
