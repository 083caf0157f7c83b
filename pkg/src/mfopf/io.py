"""Case-file parsing and result/plot-data writers.

Case files carry MW, Mvar and kV; line and converter impedances may be given
in per-unit on the grid base (``*_pu``) or in ohms (``r_ohm``/``x_ohm``, with
``b_us`` in microsiemens). Everything is converted to per-unit on load.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .converter import ConverterMode, ConverterParams, feasible_region_polyline
from .network import (Bus, Generator, Grid, Line, MultiFrequencySystem, ShuntCapacitor,
                      validate_system)

SCHEMA_VERSION = "1.0"


class CaseError(ValueError):
    """Schema or validation failure; message starts with the offending field path."""


_num = {"type": "number"}
_int = {"type": "integer"}

CASE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "base_mva", "grids"],
    "properties": {
        "schema_version": {"type": "string"},
        "name": {"type": "string"},
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "grids": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "required": ["id", "frequency_hz", "base_kv", "buses"],
            "properties": {
                "id": _int, "name": {"type": "string"},
                "frequency_hz": {"type": "number", "exclusiveMinimum": 0},
                "base_kv": {"type": "number", "exclusiveMinimum": 0},
                "buses": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "required": ["id", "kind"],
                    "properties": {
                        "id": _int, "kind": {"enum": ["slack", "voltage_controlled", "load"]},
                        "v_ref": _num, "v_min": _num, "v_max": _num,
                        "p_load_mw": _num, "q_load_mvar": _num},
                    "additionalProperties": False}},
                "lines": {"type": "array", "items": {
                    "type": "object", "required": ["from", "to"],
                    "properties": {
                        "from": _int, "to": _int, "r_pu": _num, "x_pu": _num, "b_pu": _num,
                        "y_pu": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        "r_ohm": _num, "x_ohm": _num, "b_us": _num,
                        "i_max_pu": _num, "p_max_mw": _num, "tap": _num},
                    "additionalProperties": False}},
                "generators": {"type": "array", "items": {
                    "type": "object", "required": ["bus", "p_min_mw", "p_max_mw", "q_min_mvar", "q_max_mvar"],
                    "properties": {
                        "bus": _int, "p_min_mw": _num, "p_max_mw": _num, "q_min_mvar": _num,
                        "q_max_mvar": _num, "p_set_mw": _num, "q_set_mvar": _num},
                    "additionalProperties": False}},
                "capacitors": {"type": "array", "items": {
                    "type": "object", "required": ["bus", "steps_mvar"],
                    "properties": {
                        "bus": _int, "steps_mvar": {"type": "array", "minItems": 1, "items": _num},
                        "q_prev_mvar": _num},
                    "additionalProperties": False}},
            },
            "additionalProperties": False}},
        "converters": {"type": "array", "items": {
            "type": "object", "required": ["id", "bus_s", "bus_l"],
            "properties": {
                "id": _int, "name": {"type": "string"}, "bus_s": _int, "bus_l": _int,
                "r1_pu": _num, "x1_pu": _num, "r2_pu": _num, "x2_pu": _num,
                "a0_pu": _num, "a1_pu": _num, "a2_rect_pu": _num, "a2_inv_pu": _num,
                "v_dc_kv": _num, "dc_base_kv_s": _num, "dc_base_kv_l": _num,
                "k_m": _num, "i_c_max_pu": _num, "s_rated_mva": _num, "k_q": _num,
                "is_lf_slack": {"type": "boolean"}, "rectifier_side": {"enum": ["s", "l"]},
                "z_filter_pu": {"type": ["array", "null"], "items": _num, "minItems": 2, "maxItems": 2},
                "mode": {"type": "object", "properties": {
                    "side1": {"enum": ["PQ", "PV"]}, "side2": {"enum": ["QVdc", "VVdc"]},
                    "p_s_mw": _num, "q_s_mvar": _num, "v_s_pu": _num, "q_l_mvar": _num, "v_l_pu": _num},
                    "additionalProperties": False}},
            "additionalProperties": False}},
        "profile": {"type": "object", "properties": {
            "multipliers": {"type": "array", "items": {"type": "number", "minimum": 0}},
            "labels": {"type": "array", "items": {"type": "string"}}}},
        "options": {"type": "object"},
    },
    "additionalProperties": False,
}


@dataclass
class CaseOptions:
    alpha1: float = 1.0
    alpha2: float = 0.0
    tol: float = 1e-6
    max_iters: int = 200
    starts: tuple = ("flat", "warm", "prev")
    extra: dict = field(default_factory=dict)


@dataclass
class Case:
    system: MultiFrequencySystem
    options: CaseOptions
    profile: tuple = ()
    profile_labels: tuple = ()


def _path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def _line(d: dict, base_kv: float, base_mva: float, where: str) -> Line:
    zb = base_kv ** 2 / base_mva
    if "y_pu" in d:
        # series admittance as written by case_to_dict; round-trips exactly
        g, b_ser = d["y_pu"]
        if g == 0 and b_ser == 0:
            raise CaseError(f"{where}: zero series admittance")
        lim = {k: v for k, v in (("i_max", d.get("i_max_pu")), ("tap", d.get("tap"))) if v is not None}
        if "p_max_mw" in d:
            lim["p_max"] = d["p_max_mw"] / base_mva
        return Line(d["from"], d["to"], g, b_ser, 0.5 * d.get("b_pu", 0.0), **lim)
    if "r_pu" in d or "x_pu" in d:
        r, x, b = d.get("r_pu", 0.0), d.get("x_pu", 0.0), d.get("b_pu", 0.0)
    elif "r_ohm" in d or "x_ohm" in d:
        r, x, b = d.get("r_ohm", 0.0) / zb, d.get("x_ohm", 0.0) / zb, d.get("b_us", 0.0) * 1e-6 * zb
    else:
        raise CaseError(f"{where}: needs r_pu/x_pu or r_ohm/x_ohm")
    if r == 0 and x == 0:
        raise CaseError(f"{where}: zero series impedance")
    lim = {}
    if "i_max_pu" in d:
        lim["i_max"] = d["i_max_pu"]
    if "p_max_mw" in d:
        lim["p_max"] = d["p_max_mw"] / base_mva
    if "tap" in d:
        lim["tap"] = d["tap"]
    return Line.from_impedance(d["from"], d["to"], r, x, b, **lim)


def _check_references(doc: dict):
    """Bus references must resolve; report the first that does not by field path."""
    grid_of = {}
    for gi, g in enumerate(doc["grids"]):
        for b in g["buses"]:
            grid_of[b["id"]] = g["id"]
        own = {b["id"] for b in g["buses"]}
        refs = [(f"lines/{i}/{k}", d[k]) for i, d in enumerate(g.get("lines", [])) for k in ("from", "to")]
        refs += [(f"{fam}/{i}/bus", d["bus"]) for fam in ("generators", "capacitors")
                 for i, d in enumerate(g.get(fam, []))]
        for where, bus in refs:
            if bus not in own:
                raise CaseError(f"grids/{gi}/{where}: bus {bus} is not in grid {g['id']}")
    for i, d in enumerate(doc.get("converters", [])):
        for k in ("bus_s", "bus_l"):
            if d[k] not in grid_of:
                raise CaseError(f"converters/{i}/{k}: bus {d[k]} does not exist")


def case_from_dict(doc: dict) -> Case:
    try:
        jsonschema.validate(doc, CASE_SCHEMA)
    except jsonschema.ValidationError as err:
        raise CaseError(f"{_path(err)}: {err.message}") from None
    if doc["schema_version"].split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise CaseError(f"schema_version: unsupported {doc['schema_version']!r}")
    _check_references(doc)
    base = float(doc["base_mva"])
    grids = []
    for gi, g in enumerate(doc["grids"]):
        buses = tuple(Bus(b["id"], g["id"], b["kind"], b.get("v_ref"), b.get("v_min", 0.94),
                          b.get("v_max", 1.06), b.get("p_load_mw", 0.0) / base,
                          b.get("q_load_mvar", 0.0) / base) for b in g["buses"])
        lines = tuple(_line(d, g["base_kv"], base, f"grids/{gi}/lines/{li}")
                      for li, d in enumerate(g.get("lines", [])))
        gens = tuple(Generator(d["bus"], d["p_min_mw"] / base, d["p_max_mw"] / base,
                               d["q_min_mvar"] / base, d["q_max_mvar"] / base,
                               d.get("p_set_mw", 0.0) / base, d.get("q_set_mvar", 0.0) / base)
                     for d in g.get("generators", []))
        caps = tuple(ShuntCapacitor(d["bus"], tuple(v / base for v in d["steps_mvar"]),
                                    d.get("q_prev_mvar", d["steps_mvar"][0]) / base)
                     for d in g.get("capacitors", []))
        grids.append(Grid(g["id"], g["frequency_hz"], g["base_kv"], buses, lines, gens, caps, g.get("name", "")))
    convs = []
    for d in doc.get("converters", []):
        m = d.get("mode", {})
        mode = ConverterMode(m.get("side1", "PQ"), m.get("side2", "QVdc"), m.get("p_s_mw", 0.0) / base,
                             m.get("q_s_mvar", 0.0) / base, m.get("v_s_pu", 1.0),
                             m.get("q_l_mvar", 0.0) / base, m.get("v_l_pu", 1.0))
        zf = d.get("z_filter_pu")
        convs.append(ConverterParams(
            d["id"], d["bus_s"], d["bus_l"], d.get("r1_pu", 0.0), d.get("x1_pu", 0.1),
            d.get("r2_pu", 0.0), d.get("x2_pu", 0.1), d.get("a0_pu", 0.0), d.get("a1_pu", 0.0),
            d.get("a2_rect_pu", 0.0), d.get("a2_inv_pu", 0.0), d.get("v_dc_kv", 2.0),
            d.get("dc_base_kv_s", 1.0), d.get("dc_base_kv_l", 1.0), d.get("k_m", 0.61),
            d.get("i_c_max_pu", 2.0), d.get("s_rated_mva", 250.0), d.get("k_q", 0.5),
            d.get("is_lf_slack", False), d.get("rectifier_side", "s"), base,
            complex(*zf) if zf else None, d.get("name", ""), mode))
    system = MultiFrequencySystem(tuple(grids), tuple(convs), base, doc.get("name", ""))
    rep = validate_system(system)
    if not rep.ok:
        raise CaseError("validation failed:\n" + str(rep))
    o = dict(doc.get("options", {}))
    known = {k: o.pop(k) for k in ("alpha1", "alpha2", "tol", "max_iters", "starts") if k in o}
    if "starts" in known:
        known["starts"] = tuple(known["starts"])
    prof = doc.get("profile", {})
    return Case(system, CaseOptions(**known, extra=o), tuple(prof.get("multipliers", ())),
                tuple(prof.get("labels", ())))


def parse_case(path) -> Case:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: not valid JSON ({exc})") from None
    return case_from_dict(doc)


def case_to_dict(case: Case) -> dict:
    """Inverse of :func:`case_from_dict`; lines are written as per-unit series admittances."""
    s = case.system
    base = s.base_mva
    grids = []
    for g in s.grids:
        buses = []
        for b in g.buses:
            d = {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max,
                 "p_load_mw": b.p_load * base, "q_load_mvar": b.q_load * base}
            if b.v_ref is not None:
                d["v_ref"] = b.v_ref
            buses.append(d)
        lines = []
        for ln in g.lines:
            lines.append({"from": ln.from_bus, "to": ln.to_bus, "y_pu": [ln.g, ln.b],
                          "b_pu": 2 * ln.b_shunt_half, "i_max_pu": ln.i_max, "p_max_mw": ln.p_max * base,
                          "tap": ln.tap})
        gens = [{"bus": x.bus, "p_min_mw": x.p_min * base, "p_max_mw": x.p_max * base,
                 "q_min_mvar": x.q_min * base, "q_max_mvar": x.q_max * base,
                 "p_set_mw": x.p_set * base, "q_set_mvar": x.q_set * base} for x in g.generators]
        caps = [{"bus": c.bus, "steps_mvar": [v * base for v in c.steps], "q_prev_mvar": c.q_prev * base}
                for c in g.capacitors]
        grids.append({"id": g.id, "name": g.name, "frequency_hz": g.frequency, "base_kv": g.base_kv,
                      "buses": buses, "lines": lines, "generators": gens, "capacitors": caps})
    convs = []
    for c in s.converters:
        m = c.mode
        convs.append({
            "id": c.id, "name": c.name, "bus_s": c.bus_s, "bus_l": c.bus_l,
            "r1_pu": c.r1, "x1_pu": c.x1, "r2_pu": c.r2, "x2_pu": c.x2,
            "a0_pu": c.a0, "a1_pu": c.a1, "a2_rect_pu": c.a2_rect, "a2_inv_pu": c.a2_inv,
            "v_dc_kv": c.v_dc, "dc_base_kv_s": c.dc_base_kv_s, "dc_base_kv_l": c.dc_base_kv_l,
            "k_m": c.k_m, "i_c_max_pu": c.i_c_max, "s_rated_mva": c.s_rated, "k_q": c.k_q,
            "is_lf_slack": c.is_lf_slack, "rectifier_side": c.rectifier_side,
            "z_filter_pu": [c.z_filter.real, c.z_filter.imag] if c.z_filter is not None else None,
            "mode": {"side1": m.side1, "side2": m.side2, "p_s_mw": m.p_s * base, "q_s_mvar": m.q_s * base,
                     "v_s_pu": m.v_s, "q_l_mvar": m.q_l * base, "v_l_pu": m.v_l}})
    o = case.options
    doc = {"schema_version": SCHEMA_VERSION, "name": s.name, "base_mva": base, "grids": grids,
           "converters": convs,
           "options": {"alpha1": o.alpha1, "alpha2": o.alpha2, "tol": o.tol, "max_iters": o.max_iters,
                       "starts": list(o.starts), **o.extra}}
    if case.profile:
        doc["profile"] = {"multipliers": list(case.profile), "labels": list(case.profile_labels)}
    return doc


def write_case(case: Case, path):
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n")


# ---------------------------------------------------------------- results

CSV_COLUMNS = ("step", "label", "multiplier", "status", "failed", "start", "iterations", "objective",
               "demand_mw", "losses_mw", "losses_pct", "v_max", "v_min", "violations")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def horizon_to_dict(result, config: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "horizon",
        "mode": result.mode,
        "alphas": list(result.alphas),
        "base_mva": result.base_mva,
        "capacitor_buses": result.capacitor_buses,
        "switching_counts": result.switching_counts,
        "config": config or {},
        "steps": [asdict(s) for s in result.steps],
    }


def variable_names(problem) -> list:
    """Stable names for every optimization variable, e.g. ``e:5``, ``pg:0``, ``qs:2``."""
    L = problem.layout
    names = [""] * problem.n
    for i, b in enumerate(L.bus_ids):
        names[L.e_idx[i]], names[L.f_idx[i]] = f"e:{b}", f"f:{b}"
    for i in range(len(problem.generators)):
        names[L.pg_idx[i]], names[L.qg_idx[i]] = f"pg:{i}", f"qg:{i}"
    for i, c in enumerate(problem.capacitors):
        names[L.qsh_idx[i]] = f"qsh:{i}"
    for k, c in enumerate(problem.converters):
        for key, idx in (("ps", L.ps_idx), ("qs", L.qs_idx), ("pl", L.pl_idx), ("ql", L.ql_idx)):
            names[idx[k]] = f"{key}:{c.id}"
    return names


def opf_to_dict(result, config: dict | None = None) -> dict:
    """Self-contained record of one OPF run: the exact case solved, the
    solution by variable name, and every multiplier keyed by the row it prices.

    All values are per-unit. This is what the independent verifier reads.
    """
    p = result.problem
    x = result.x
    rep = result.report
    names = variable_names(p)
    bus_ids = [int(b) for b in p.layout.bus_ids]
    duals = rep.duals or {}
    out_duals = {}
    if duals:
        y = duals["y"]
        off = 0
        rows = {}
        for key, cnt in p.row_counts.items():
            rows[key] = y[off:off + cnt]
            off += cnt
        out_duals["balance_p"] = {str(b): float(v) for b, v in zip(bus_ids, rows["P"])}
        out_duals["balance_q"] = {str(b): float(v) for b, v in zip(bus_ids, rows["Q"])}
        out_duals["voltage_set"] = {str(bus_ids[i]): float(v) for i, v in zip(p.v_buses, rows["V"])}
        out_duals["converter_balance"] = {str(c.id): float(v) for c, v in zip(p.converters, rows["conv"])}
        out_duals["angle_ref"] = {str(bus_ids[i]): float(v) for i, v in zip(p.slack_buses, rows["fslack"])}
        pinned = [{"var": names[i], "value": float(v), "y": float(yy)}
                  for (i, v), yy in zip(p.fixed, rows["fixed"])]
        pinned += [{"var": names[i], "value": float(v), "y": float(yy)}
                   for i, v, yy in zip(duals["fixed_index"], duals["fixed_value"], duals["y_fixed"])]
        out_duals["pinned"] = pinned
        zl, zu = duals["z_l_ineq"], duals["z_u_ineq"]
        off = 0
        ineq = {}
        for key, cnt in p.ineq_counts.items():
            ineq[key] = (zl[off:off + cnt], zu[off:off + cnt])
            off += cnt
        out_duals["voltage_limits"] = {str(bus_ids[i]): [float(a), float(b)]
                                       for i, a, b in zip(p.l_buses, *ineq["V"])}
        out_duals["line_current"] = [[float(a), float(b)] for a, b in zip(*ineq["I"])]
        out_duals["line_power"] = [[float(a), float(b)] for a, b in zip(*ineq["Pline"])]
        for key, side, fam in (("Icv_s", "s", "converter_current"), ("Icv_l", "l", "converter_current"),
                               ("Mcv_s", "s", "converter_modulation"), ("Mcv_l", "l", "converter_modulation")):
            d = out_duals.setdefault(fam, {})
            for c, a, b in zip(p.converters, *ineq[key]):
                d[f"{c.id}:{side}"] = [float(a), float(b)]
        out_duals["bounds"] = {names[i]: [float(a), float(b)]
                               for i, a, b in zip(p.box_index, duals["z_l_box"], duals["z_u_box"])}
    L = p.layout
    e, f = p.split(x)
    sol = {
        "buses": [{"id": b, "e": float(e[i]), "f": float(f[i])} for i, b in enumerate(bus_ids)],
        "generators": [{"index": i, "bus": g.bus, "p": float(x[L.pg_idx[i]]), "q": float(x[L.qg_idx[i]])}
                       for i, g in enumerate(p.generators)],
        "capacitors": [{"index": i, "bus": c.bus, "q": float(x[L.qsh_idx[i]])} for i, c in enumerate(p.capacitors)],
        "converters": [{"id": c.id, "p_s": float(x[L.ps_idx[k]]), "q_s": float(x[L.qs_idx[k]]),
                        "p_l": float(x[L.pl_idx[k]]), "q_l": float(x[L.ql_idx[k]])}
                       for k, c in enumerate(p.converters)],
    }
    spec = p.objective_spec
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "opf",
        "case": case_to_dict(Case(p.system, CaseOptions(alpha1=spec.alpha1, alpha2=spec.alpha2))),
        "objective": {"alpha1": spec.alpha1, "alpha2": spec.alpha2,
                      "q_sh_prev": [float(v) for v in p.q_sh_prev], "value": float(p.objective(x))},
        "converter_dispatch": bool(p.converter_dispatch),
        "status": rep.status,
        "start": rep.start,
        "iterations": rep.iterations,
        "measures": {"feasibility": rep.feasibility, "gap": rep.gap, "stationarity": rep.stationarity},
        "runs": [{"start": lbl, "status": r.status, "iterations": r.iterations, "objective": r.objective}
                 for lbl, r in result.runs],
        "config": config or {},
        "solution": sol,
        "duals": out_duals,
        "log": list(rep.log),
    }


def write_json(doc: dict, path):
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None


def write_results(result, path, fmt: str | None = None, config: dict | None = None):
    """Write a horizon result as JSON (full record) or CSV (one row per step)."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        write_json(horizon_to_dict(result, config), path)
    elif fmt == "csv":
        rows = [[getattr(s, c) for c in CSV_COLUMNS] for s in result.steps]
        write_csv(path, CSV_COLUMNS, rows)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_results(path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path, header, rows):
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from None


def emit_plot_data(results: dict, outdir):
    """Per-figure CSV series for a set of labelled horizon results.

    Writes ``losses.csv`` and ``vmax.csv`` (one column per label) and
    ``capacitors_<label>.csv`` (one column per capacitor bus).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    labels = list(results)
    n = max((len(r.steps) for r in results.values()), default=0)
    for name, attr in (("losses.csv", "losses_pct"), ("vmax.csv", "v_max")):
        rows = []
        for t in range(n):
            rows.append([t] + [getattr(results[k].steps[t], attr) if t < len(results[k].steps) else ""
                               for k in labels])
        write_csv(outdir / name, ["step"] + labels, rows)
    for k, r in results.items():
        head = ["step"] + [f"bus_{b}_mvar" for b in r.capacitor_buses]
        rows = [[s.step] + [q * r.base_mva for q in s.q_sh] for s in r.steps]
        write_csv(outdir / f"capacitors_{k}.csv", head, rows)
    return outdir


def emit_region(cp: ConverterParams, v_terminal: float, side: str, path,
                operating_point: tuple | None = None, n_points: int = 180):
    """Closed polyline of the converter operating region (MW, Mvar), optionally
    followed by one row holding the operating point."""
    reg = feasible_region_polyline(cp, v_terminal, n_points, side)
    base = cp.base_mva
    rows = []
    if not reg.empty:
        pts = np.vstack([reg.points, reg.points[:1]])
        rows = [["boundary", p * base, q * base] for p, q in pts]
    if operating_point is not None:
        rows.append(["operating_point", operating_point[0] * base, operating_point[1] * base])
    write_csv(path, ["kind", "p_mw", "q_mvar"], rows)
    return reg
