"""MATPOWER case import and the native JSON grid format.

MATPOWER files are import-only.  :func:`parse_matpower` extracts the
``baseMVA``, ``bus``, ``gen``, ``branch`` and ``gencost`` assignments into a
:class:`RawCase`; :func:`to_grid` converts that to a per-unit :class:`Grid`.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, fields
from typing import Any

import networkx as nx

from .errors import (IslandedBus, MalformedRow, MissingTable, NegativeResistance,
                     SchemaVersionMismatch, UnsupportedCostModel)
from .grid import (DEFAULT_ANGLE_LIMIT, AcBranch, Box, Bus, DcBranch, GenSpec, Grid,
                   LoadSpec, PiecewiseLinear, Polygon, Quadratic)

SCHEMA_VERSION = 1
UNLIMITED_RATING_MVA = 9900.0

# MATPOWER column positions (0-based) of the fields we keep.
_BUS_COLS = {"id": 0, "type": 1, "Pd": 2, "Qd": 3, "Gs": 4, "Bs": 5, "baseKV": 9, "Vmax": 11, "Vmin": 12}
_GEN_COLS = {"bus": 0, "Qmax": 3, "Qmin": 4, "status": 7, "Pmax": 8, "Pmin": 9}
_BRANCH_COLS = {"from": 0, "to": 1, "r": 2, "x": 3, "b": 4, "rateA": 5, "tap": 8, "shift": 9,
                "status": 10, "angmin": 11, "angmax": 12}
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_KNOWN = ("baseMVA", "bus", "gen", "branch", "gencost")


@dataclass(frozen=True)
class RawCase:
    """Tables as read from a case file, in original row order and units."""

    base_mva: float
    bus_table: tuple        # (id, type, Pd, Qd, Gs, Bs, Vmax, Vmin, baseKV)
    gen_table: tuple        # (bus, Pmax, Pmin, Qmax, Qmin, status)
    branch_table: tuple     # (from, to, r, x, b, rateA, tap, shift, status, angmin, angmax)
    gencost_table: tuple    # (model, startup, shutdown, n, coefficients...)

    def to_dict(self) -> dict:
        return {"base_mva": self.base_mva,
                "bus_table": [list(r) for r in self.bus_table],
                "gen_table": [list(r) for r in self.gen_table],
                "branch_table": [list(r) for r in self.branch_table],
                "gencost_table": [list(r) for r in self.gencost_table]}

    @classmethod
    def from_dict(cls, data: dict) -> "RawCase":
        return cls(float(data["base_mva"]),
                   *(tuple(tuple(float(v) for v in row) for row in data[name])
                     for name in ("bus_table", "gen_table", "branch_table", "gencost_table")))


# ---------------------------------------------------------------------------
# MATPOWER text
# ---------------------------------------------------------------------------

_ASSIGN = re.compile(r"(?:\bmpc\.)?\b(\w+)\s*=\s*(\[|\{|[-+0-9.eE]+)")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_number(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MalformedRow(line, f"not a number: {tok!r}") from None


def _read_matrix(text: str, start: int, name: str) -> list[tuple[int, list[float]]]:
    end = text.find("]", start)
    if end < 0:
        raise MalformedRow(text.count("\n", 0, start) + 1, f"unterminated '{name}' matrix")
    body = text[start:end]
    line0 = text.count("\n", 0, start) + 1
    rows: list[tuple[int, list[float]]] = []
    offset = 0
    for raw_line in body.split("\n"):
        lineno = line0 + offset
        offset += 1
        for chunk in raw_line.split(";"):
            toks = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
            if toks:
                rows.append((lineno, [_parse_number(t, lineno) for t in toks]))
    return rows


def parse_matpower(text: str) -> RawCase:
    """Parse the five MATPOWER tables from a case file's text."""
    clean = _strip_comments(text)
    found: dict[str, Any] = {}
    for m in _ASSIGN.finditer(clean):
        name, head = m.group(1), m.group(2)
        if name not in _KNOWN:
            if head in ("[", "{"):
                warnings.warn(f"ignoring unsupported table '{name}'")
            continue
        if head == "{":
            raise MalformedRow(clean.count("\n", 0, m.start()) + 1, f"'{name}' must be a matrix")
        if head == "[":
            found[name] = _read_matrix(clean, m.end(), name)
        else:
            found[name] = float(head)
    for name in _KNOWN:
        if name not in found:
            raise MissingTable(name)

    base = found["baseMVA"]
    if not isinstance(base, float) or base <= 0:
        raise MalformedRow(0, "baseMVA must be a positive scalar")

    def pick(table: str, cols: dict, keys: tuple) -> tuple:
        out = []
        for line, vals in found[table]:
            if len(vals) < _MIN_COLS[table]:
                raise MalformedRow(line, f"'{table}' row has {len(vals)} columns, "
                                         f"expected at least {_MIN_COLS[table]}")
            out.append(tuple(vals[cols[k]] for k in keys))
        return tuple(out)

    bus = pick("bus", _BUS_COLS, ("id", "type", "Pd", "Qd", "Gs", "Bs", "Vmax", "Vmin", "baseKV"))
    gen = pick("gen", _GEN_COLS, ("bus", "Pmax", "Pmin", "Qmax", "Qmin", "status"))
    branch = pick("branch", _BRANCH_COLS, ("from", "to", "r", "x", "b", "rateA", "tap", "shift",
                                           "status", "angmin", "angmax"))
    gencost = []
    for line, vals in found["gencost"]:
        if len(vals) < 4:
            raise MalformedRow(line, "gencost row needs model, startup, shutdown, n")
        model, n = int(vals[0]), int(vals[3])
        need = 4 + (2 * n if model == 1 else n)
        if model not in (1, 2):
            raise UnsupportedCostModel(f"gencost model {model} on line {line}")
        if len(vals) < need:
            raise MalformedRow(line, f"gencost row needs {need} columns")
        if model == 2 and any(c != 0.0 for c in vals[4:4 + max(n - 3, 0)]):
            raise UnsupportedCostModel(f"polynomial cost of degree {n - 1} on line {line}")
        gencost.append(tuple(vals[:need]))

    ids = {row[0] for row in bus}
    for row in gen:
        if row[0] not in ids:
            raise MalformedRow(0, f"generator at unknown bus {row[0]:g}")
    for k, row in enumerate(branch):
        if row[0] not in ids or row[1] not in ids:
            raise MalformedRow(0, f"branch {k + 1} references an unknown bus")
    if len(gencost) == 2 * len(gen):
        warnings.warn("reactive-power cost rows in gencost are ignored")
        gencost = gencost[: len(gen)]
    elif len(gencost) != len(gen):
        raise MalformedRow(0, f"{len(gencost)} gencost rows for {len(gen)} generators")
    return RawCase(base, bus, gen, branch, tuple(gencost))


def read_case(path) -> RawCase:
    with open(path, encoding="utf-8") as fh:
        return parse_matpower(fh.read())


# ---------------------------------------------------------------------------
# Conversion to the per-unit model
# ---------------------------------------------------------------------------

def _cost_from_row(row: tuple, base: float, label: int):
    model, n = int(row[0]), int(row[3])
    coeffs = row[4:]
    if model == 1:
        pts = tuple((coeffs[2 * k] / base, coeffs[2 * k + 1]) for k in range(n))
        if n == 1:
            return Quadratic(0.0, 0.0, pts[0][1])
        fn = PiecewiseLinear(pts)
    else:
        poly = list(coeffs[-3:]) if n >= 3 else [0.0] * (3 - n) + list(coeffs)
        c2, c1, c0 = poly
        fn = Quadratic(c2 * base ** 2, c1 * base, c0)
    if not fn.is_convex:
        raise UnsupportedCostModel(f"generator {label}: cost function is not convex")
    return fn


def to_grid(case: RawCase, name: str = "") -> Grid:
    """Per-unit conversion; out-of-service elements are dropped and buses renumbered."""
    base = case.base_mva
    buses_in = [row for row in case.bus_table if int(row[1]) != 4]
    index = {row[0]: k for k, row in enumerate(buses_in)}
    buses = tuple(Bus(v_min=row[7], v_max=row[6], g_shunt=row[4] / base, b_shunt=row[5] / base,
                      base_kv=row[8], label=int(row[0])) for row in buses_in)
    ref = next((index[row[0]] for row in buses_in if int(row[1]) == 3), 0)

    ac = []
    for k, row in enumerate(case.branch_table):
        f, t, r, x, b, rate, tap, shift, status, amin, amax = row
        if status == 0 or f not in index or t not in index:
            continue
        if r < 0:
            raise NegativeResistance(k + 1)
        i, j = index[f], index[t]
        vi, vj = buses[i], buses[j]
        imax = (rate if rate > 0 else UNLIMITED_RATING_MVA) / base
        lo = math.radians(amin) if -90.0 < amin <= 0.0 else -DEFAULT_ANGLE_LIMIT
        hi = math.radians(amax) if 0.0 <= amax < 90.0 else DEFAULT_ANGLE_LIMIT
        if amin == 0.0 and amax == 0.0:
            lo, hi = -DEFAULT_ANGLE_LIMIT, DEFAULT_ANGLE_LIMIT
        ac.append(AcBranch(i, j, r=r, x=x, b=b, tap=tap if tap != 0 else 1.0,
                           shift=math.radians(shift), i_max_from=imax, i_max_to=imax,
                           drop_lo=max(1.0 - vj.v_max / vi.v_min, -1.0),
                           drop_hi=1.0 - vj.v_min / vi.v_max,
                           ang_lo=lo, ang_hi=hi, label=k + 1))

    g = nx.Graph()
    g.add_nodes_from(range(len(buses)))
    g.add_edges_from((br.from_bus, br.to_bus) for br in ac)
    if len(buses) and not nx.is_connected(g):
        reach = nx.node_connected_component(g, ref)
        lonely = min(k for k in range(len(buses)) if k not in reach)
        raise IslandedBus(buses[lonely].label)

    gens = []
    for k, (row, cost_row) in enumerate(zip(case.gen_table, case.gencost_table)):
        bus, pmax, pmin, qmax, qmin, status = row
        if status <= 0 or bus not in index:
            continue
        gens.append(GenSpec(index[bus], Box(pmin / base, pmax / base, qmin / base, qmax / base),
                            _cost_from_row(cost_row, base, k + 1), label=k + 1))

    loads = [LoadSpec.fixed(index[row[0]], row[2] / base, row[3] / base, label=int(row[0]))
             for row in buses_in if row[2] != 0.0 or row[3] != 0.0]
    return Grid(buses, tuple(ac), (), tuple(gens), tuple(loads), base_mva=base,
                reference_bus=ref, name=name)


def scale_all_powers(case: RawCase, factor: float) -> RawCase:
    """Multiply every power quantity (loads, shunts, limits, ratings) by ``factor``."""
    bus = tuple((r[0], r[1], r[2] * factor, r[3] * factor, r[4] * factor, r[5] * factor,
                 *r[6:]) for r in case.bus_table)
    gen = tuple((r[0], r[1] * factor, r[2] * factor, r[3] * factor, r[4] * factor, r[5])
                for r in case.gen_table)
    br = tuple((*r[:5], r[5] * factor, *r[6:]) for r in case.branch_table)
    return RawCase(case.base_mva, bus, gen, br, case.gencost_table)


# ---------------------------------------------------------------------------
# Native JSON
# ---------------------------------------------------------------------------

def _region_to(obj) -> dict:
    if isinstance(obj, Box):
        return {"type": "box", "p_min": obj.p_min, "p_max": obj.p_max,
                "q_min": obj.q_min, "q_max": obj.q_max}
    return {"type": "polygon", "vertices": [list(v) for v in obj.vertices]}


def _fn_to(obj) -> dict:
    if isinstance(obj, Quadratic):
        return {"type": "quadratic", "c2": obj.c2, "c1": obj.c1, "c0": obj.c0}
    return {"type": "piecewise_linear", "points": [list(p) for p in obj.points]}


def _plain(obj, kind) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(kind)}


def emit_json(grid: Grid) -> str:
    """Serialize a grid; floats are written with full round-trip precision."""
    doc = {
        "schema": SCHEMA_VERSION,
        "name": grid.name,
        "base_mva": grid.base_mva,
        "reference_bus": grid.reference_bus,
        "buses": [_plain(b, Bus) for b in grid.buses],
        "ac_branches": [_plain(b, AcBranch) for b in grid.ac_branches],
        "dc_branches": [_plain(b, DcBranch) for b in grid.dc_branches],
        "generators": [{"bus": g.bus, "label": g.label, "capability": _region_to(g.capability),
                        "cost": _fn_to(g.cost)} for g in grid.generators],
        "loads": [{"bus": d.bus, "label": d.label, "region": _region_to(d.region),
                   "benefit": _fn_to(d.benefit)} for d in grid.loads],
    }
    return json.dumps(doc, indent=1)


def _known(data: dict, allowed: set, where: str) -> dict:
    extra = set(data) - allowed
    if extra:
        warnings.warn(f"ignoring unknown field(s) {sorted(extra)} in {where}")
    return {k: v for k, v in data.items() if k in allowed}


def _region_from(data: dict):
    kind = data.get("type")
    if kind == "box":
        d = _known(data, {"type", "p_min", "p_max", "q_min", "q_max"}, "region")
        return Box(float(d["p_min"]), float(d["p_max"]), float(d["q_min"]), float(d["q_max"]))
    if kind == "polygon":
        d = _known(data, {"type", "vertices"}, "region")
        return Polygon(tuple((float(p), float(q)) for p, q in d["vertices"]))
    raise ValueError(f"unknown region type {kind!r}")


def _fn_from(data: dict):
    kind = data.get("type")
    if kind == "quadratic":
        d = _known(data, {"type", "c2", "c1", "c0"}, "function")
        return Quadratic(float(d["c2"]), float(d["c1"]), float(d["c0"]))
    if kind == "piecewise_linear":
        d = _known(data, {"type", "points"}, "function")
        return PiecewiseLinear(tuple((float(x), float(f)) for x, f in d["points"]))
    raise ValueError(f"unknown function type {kind!r}")


def _typed(kind, data: dict, where: str):
    names = {f.name: f.type for f in fields(kind)}
    d = _known(data, set(names), where)
    return kind(**{k: (int(v) if k in ("from_bus", "to_bus", "label") else float(v))
                   for k, v in d.items()})


def parse_json(text: str) -> Grid:
    doc = json.loads(text)
    version = doc.get("schema")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected schema {SCHEMA_VERSION}, found {version!r}")
    doc = _known(doc, {"schema", "name", "base_mva", "reference_bus", "buses", "ac_branches",
                       "dc_branches", "generators", "loads"}, "grid")
    gens = []
    for g in doc.get("generators", []):
        g = _known(g, {"bus", "label", "capability", "cost"}, "generator")
        gens.append(GenSpec(int(g["bus"]), _region_from(g["capability"]), _fn_from(g["cost"]),
                            int(g.get("label", 0))))
    loads = []
    for d in doc.get("loads", []):
        d = _known(d, {"bus", "label", "region", "benefit"}, "load")
        loads.append(LoadSpec(int(d["bus"]), _region_from(d["region"]),
                              _fn_from(d.get("benefit", {"type": "quadratic", "c2": 0, "c1": 0,
                                                          "c0": 0})),
                              int(d.get("label", 0))))
    return Grid(
        buses=tuple(_typed(Bus, b, "bus") for b in doc["buses"]),
        ac_branches=tuple(_typed(AcBranch, b, "AC branch") for b in doc.get("ac_branches", [])),
        dc_branches=tuple(_typed(DcBranch, b, "DC branch") for b in doc.get("dc_branches", [])),
        generators=tuple(gens),
        loads=tuple(loads),
        base_mva=float(doc.get("base_mva", 100.0)),
        reference_bus=int(doc.get("reference_bus", 0)),
        name=str(doc.get("name", "")),
    )


def emit_raw_json(case: RawCase) -> str:
    return json.dumps({"schema": SCHEMA_VERSION, "raw_case": case.to_dict()})


def parse_raw_json(text: str) -> RawCase:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected schema {SCHEMA_VERSION}, found {doc.get('schema')!r}")
    return RawCase.from_dict(doc["raw_case"])


def load_grid(path, fmt: str = "auto") -> Grid:
    """Read a grid from a MATPOWER ``.m`` or native ``.json`` file."""
    path = str(path)
    if fmt == "auto":
        fmt = "json" if path.endswith(".json") else "matpower"
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "json":
        return parse_json(text)
    if fmt == "matpower":
        return to_grid(parse_matpower(text), name=path.rsplit("/", 1)[-1].rsplit(".", 1)[0])
    raise ValueError(f"unknown format {fmt!r}")
