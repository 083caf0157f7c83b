"""Independent KKT certification of an OPF solution file.

The checker rebuilds every residual from the case embedded in the file with
its own dense complex arithmetic and differentiates the Lagrangian by
central finite differences. It shares no evaluation code with the solver;
only the case parser is reused.

Row conventions priced by the exported multipliers (all per-unit):

* ``balance_p``/``balance_q``: Re/Im of V conj(Y V) minus generation plus
  load plus converter withdrawal at ``bus_s`` minus injection at ``bus_l``;
  the reactive row also subtracts |V|^2 q_sh at capacitor buses.
* ``voltage_set``: |V|^2 - v_set^2.
* ``converter_balance``: p_l - p_s + 2 a0 + sum over sides of
  (R + a2) I^2 + a1 I with I = |S| / |V|.
* ``angle_ref``: imaginary voltage part at each grid's slack bus.
* ``pinned``: var - value.
* inequalities carry ``[z_lower, z_upper]`` pairs; ``voltage_limits`` is
  |V|^2, ``line_current`` |y|^2 |V_k - V_j|^2, ``line_power`` the series-branch
  active flow, ``converter_current`` p^2 + q^2 - Imax^2 |V|^2 and
  ``converter_modulation`` the dc-link ceiling (both bounded above by zero).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import case_from_dict


class VerificationError(ValueError):
    """The solution file is structurally incomplete."""


@dataclass
class Certificate:
    feasibility: float
    gap: float
    stationarity: float
    dual_sign: float
    converter_balance: dict
    converter_losses: dict
    capacitors_exact: bool
    notes: list = field(default_factory=list)

    def passed(self, tol_feas: float = 1e-6, tol_gap: float = 1e-6, tol_stat: float = 1e-5) -> bool:
        return (self.feasibility <= tol_feas and self.gap <= tol_gap and self.stationarity <= tol_stat
                and self.dual_sign <= tol_feas and self.capacitors_exact)

    def summary(self) -> str:
        return (f"feasibility={self.feasibility:.3e} gap={self.gap:.3e} "
                f"stationarity={self.stationarity:.3e} dual_sign={self.dual_sign:.3e} "
                f"capacitors_exact={self.capacitors_exact}")


class _Model:
    """Residual evaluator over a flat vector ordered by variable name."""

    def __init__(self, doc: dict):
        self.sys = case_from_dict(doc["case"]).system
        sol = doc["solution"]
        self.bus_ids = [b["id"] for b in sol["buses"]]
        self.pos = {b: i for i, b in enumerate(self.bus_ids)}
        nb = len(self.bus_ids)
        names = [f"e:{b}" for b in self.bus_ids] + [f"f:{b}" for b in self.bus_ids]
        values = [b["e"] for b in sol["buses"]] + [b["f"] for b in sol["buses"]]
        for g in sol["generators"]:
            names += [f"pg:{g['index']}", f"qg:{g['index']}"]
            values += [g["p"], g["q"]]
        for c in sol["capacitors"]:
            names.append(f"qsh:{c['index']}")
            values.append(c["q"])
        for c in sol["converters"]:
            for k in ("ps", "qs", "pl", "ql"):
                names.append(f"{k}:{c['id']}")
            values += [c["p_s"], c["q_s"], c["p_l"], c["q_l"]]
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}
        self.v = np.array(values, dtype=float)
        self.nb = nb

        buses = {b.id: b for g in self.sys.grids for b in g.buses}
        self.buses = [buses[b] for b in self.bus_ids]
        self.gens = [gen for g in self.sys.grids for gen in g.generators]
        self.caps = [c for g in self.sys.grids for c in g.capacitors]
        self.convs = list(self.sys.converters)
        if len(self.gens) != len(sol["generators"]) or len(self.caps) != len(sol["capacitors"]):
            raise VerificationError("solution does not match the embedded case")

        Y = np.zeros((nb, nb), dtype=complex)
        self.lines = []
        for g in self.sys.grids:
            for ln in g.lines:
                k, j = self.pos[ln.from_bus], self.pos[ln.to_bus]
                ys = complex(ln.g, ln.b)
                ysh = 1j * ln.b_shunt_half
                t = ln.tap
                Y[k, k] += (ys + ysh) / t ** 2
                Y[j, j] += ys + ysh
                Y[k, j] -= ys / t
                Y[j, k] -= ys / t
                self.lines.append((k, j, ys, ln.i_max, ln.p_max))
        self.Y = Y

        vset = {}
        for i, b in enumerate(self.buses):
            if b.kind != "load":
                vset[i] = b.v_ref
        for c in self.convs:
            if c.is_lf_slack:
                continue
            if c.mode.side1 == "PV":
                vset.setdefault(self.pos[c.bus_s], c.mode.v_s)
            if c.mode.side2 == "VVdc":
                vset.setdefault(self.pos[c.bus_l], c.mode.v_l)
        self.vset = vset
        self.free_v = [i for i in range(nb) if i not in vset]
        self.slack = [self.pos[g.slack_bus.id] for g in self.sys.grids]

    def col(self, name):
        return self.index[name]

    def voltages(self, v):
        return v[:self.nb] + 1j * v[self.nb:2 * self.nb]

    def _conv_side(self, v, c, side):
        V = self.voltages(v)
        bus = c.bus_s if side == "s" else c.bus_l
        p = v[self.col(f"p{side}:{c.id}")]
        q = v[self.col(f"q{side}:{c.id}")]
        return V[self.pos[bus]], p, q

    def converter_terms(self, v, c):
        """(balance residual, total losses) with losses evaluated independently."""
        losses = 2.0 * c.a0
        for side in ("s", "l"):
            Vt, p, q = self._conv_side(v, c, side)
            i2 = (p * p + q * q) / abs(Vt) ** 2
            r = c.r1 if side == "s" else c.r2
            a2 = c.a2_rect if side == c.rectifier_side else c.a2_inv
            losses += (r + a2) * i2 + c.a1 * math.sqrt(i2)
        p_s = v[self.col(f"ps:{c.id}")]
        p_l = v[self.col(f"pl:{c.id}")]
        return p_l - p_s + losses, losses

    def equalities(self, v, pinned) -> dict:
        V = self.voltages(v)
        S = V * np.conj(self.Y @ V)
        P, Q = S.real.copy(), S.imag.copy()
        w = np.abs(V) ** 2
        for i, b in enumerate(self.buses):
            P[i] += b.p_load
            Q[i] += b.q_load
        for i, g in enumerate(self.gens):
            P[self.pos[g.bus]] -= v[self.col(f"pg:{i}")]
            Q[self.pos[g.bus]] -= v[self.col(f"qg:{i}")]
        for i, c in enumerate(self.caps):
            k = self.pos[c.bus]
            Q[k] -= w[k] * v[self.col(f"qsh:{i}")]
        for c in self.convs:
            ks, kl = self.pos[c.bus_s], self.pos[c.bus_l]
            P[ks] += v[self.col(f"ps:{c.id}")]
            Q[ks] += v[self.col(f"qs:{c.id}")]
            P[kl] -= v[self.col(f"pl:{c.id}")]
            Q[kl] -= v[self.col(f"ql:{c.id}")]
        return {
            "balance_p": {str(b): P[i] for i, b in enumerate(self.bus_ids)},
            "balance_q": {str(b): Q[i] for i, b in enumerate(self.bus_ids)},
            "voltage_set": {str(self.bus_ids[i]): w[i] - t * t for i, t in self.vset.items()},
            "converter_balance": {str(c.id): self.converter_terms(v, c)[0] for c in self.convs},
            "angle_ref": {str(self.bus_ids[i]): V[i].imag for i in self.slack},
            "pinned": [v[self.col(p["var"])] - p["value"] for p in pinned],
        }

    def inequalities(self, v) -> dict:
        """Each entry maps a key to (value, lower, upper); infinite sides use +-inf."""
        V = self.voltages(v)
        w = np.abs(V) ** 2
        inf = math.inf
        out = {"voltage_limits": {str(self.bus_ids[i]): (w[i], self.buses[i].v_min ** 2, self.buses[i].v_max ** 2)
                                  for i in self.free_v}}
        cur, powr = [], []
        for k, j, ys, imax, pmax in self.lines:
            dv = V[k] - V[j]
            cur.append((abs(ys) ** 2 * abs(dv) ** 2, -inf, imax ** 2))
            # series-branch active flow seen from the from-bus
            powr.append(((V[k] * np.conj(ys * dv)).real, -pmax, pmax))
        out["line_current"], out["line_power"] = cur, powr
        ic, mod = {}, {}
        for c in self.convs:
            for side in ("s", "l"):
                Vt, p, q = self._conv_side(v, c, side)
                wt = abs(Vt) ** 2
                ic[f"{c.id}:{side}"] = (p * p + q * q - c.i_c_max ** 2 * wt, -inf, 0.0)
                z = complex(c.r1, c.x1) if side == "s" else complex(c.r2, c.x2)
                y = 1.0 / z
                sg = 1.0 if side == "s" else -1.0
                base = c.dc_base_kv_s if side == "s" else c.dc_base_kv_l
                kv = c.k_m * (c.v_dc / base) / abs(z)
                a = p - sg * wt * y.real
                bq = q + sg * wt * y.imag
                mod[f"{c.id}:{side}"] = (a * a + bq * bq - kv * kv * wt, -inf, 0.0)
        out["converter_current"], out["converter_modulation"] = ic, mod
        return out

    def bounds(self) -> dict:
        out = {}
        for i, g in enumerate(self.gens):
            out[f"pg:{i}"] = (g.p_min, g.p_max)
            out[f"qg:{i}"] = (g.q_min, g.q_max)
        for i, c in enumerate(self.caps):
            out[f"qsh:{i}"] = (min(c.steps), max(c.steps))
        for c in self.convs:
            lim = c.k_q * c.s_rated / c.base_mva
            out[f"qs:{c.id}"] = (-math.inf, lim)
            out[f"ql:{c.id}"] = (-lim, math.inf)
        return out


def _flatten(d):
    if isinstance(d, dict):
        return [d[k] for k in sorted(d)]
    return list(d)


def _lookup(duals: dict, fam: str, key):
    try:
        return duals[fam][key] if isinstance(duals[fam], dict) else duals[fam][int(key)]
    except (KeyError, IndexError):
        raise VerificationError(f"missing multiplier {fam}[{key}]") from None


def verify_solution(doc: dict, fd_step: float = 1e-6) -> Certificate:
    if doc.get("kind") != "opf":
        raise VerificationError("not an OPF solution file")
    duals = doc.get("duals") or {}
    if not duals:
        raise VerificationError("solution file carries no multipliers")
    m = _Model(doc)
    pinned = duals.get("pinned", [])
    pinned_vars = {p["var"] for p in pinned}
    notes = []

    # expected pins when converter dispatch is disabled
    if not doc.get("converter_dispatch", True):
        for c in m.convs:
            want = [("qs", c.mode.q_s)] if c.is_lf_slack else [("ps", c.mode.p_s)]
            if not c.is_lf_slack and c.mode.side1 == "PQ":
                want.append(("qs", c.mode.q_s))
            if not c.is_lf_slack and c.mode.side2 == "QVdc":
                want.append(("ql", c.mode.q_l))
            for key, val in want:
                hit = [p for p in pinned if p["var"] == f"{key}:{c.id}"]
                if not hit or abs(hit[0]["value"] - val) > 1e-9:
                    notes.append(f"converter {c.id}: {key} not pinned at its schedule")

    eq_keys = ["balance_p", "balance_q", "voltage_set", "converter_balance", "angle_ref"]
    base_eq = m.equalities(m.v, pinned)
    eq_mult = []
    for fam in eq_keys:
        for key in sorted(base_eq[fam]):
            eq_mult.append(_lookup(duals, fam, key))
    eq_mult += [p["y"] for p in pinned]
    eq_mult = np.array(eq_mult, dtype=float)

    def eq_vec(v):
        d = m.equalities(v, pinned)
        return np.array([val for fam in eq_keys for val in _flatten(d[fam])] + d["pinned"], dtype=float)

    ineq0 = m.inequalities(m.v)
    in_keys = ["voltage_limits", "line_current", "line_power", "converter_current", "converter_modulation"]
    zl, zu, lo, hi = [], [], [], []
    for fam in in_keys:
        entries = ineq0[fam]
        keys = sorted(entries) if isinstance(entries, dict) else range(len(entries))
        for key in keys:
            a, b = _lookup(duals, fam, key)
            zl.append(a)
            zu.append(b)
            lo.append(entries[key][1])
            hi.append(entries[key][2])

    def ineq_vec(v):
        d = m.inequalities(v)
        out = []
        for fam in in_keys:
            entries = d[fam]
            keys = sorted(entries) if isinstance(entries, dict) else range(len(entries))
            out += [entries[k][0] for k in keys]
        return np.array(out, dtype=float)

    zl, zu, lo, hi = (np.array(a, dtype=float) for a in (zl, zu, lo, hi))
    box = {k: b for k, b in m.bounds().items() if k not in pinned_vars}
    bnames = sorted(box)
    bcol = np.array([m.col(k) for k in bnames], dtype=int)
    blo = np.array([box[k][0] for k in bnames], dtype=float)
    bhi = np.array([box[k][1] for k in bnames], dtype=float)
    bz = np.array([_lookup(duals, "bounds", k) for k in bnames], dtype=float).reshape(-1, 2)

    # feasibility
    h = ineq_vec(m.v)
    xb = m.v[bcol]
    viol = [np.abs(eq_vec(m.v)).max(initial=0.0),
            np.maximum(lo - h, 0).max(initial=0.0), np.maximum(h - hi, 0).max(initial=0.0),
            np.maximum(blo - xb, 0).max(initial=0.0), np.maximum(xb - bhi, 0).max(initial=0.0)]
    feas = float(max(viol))

    # complementarity over finite sides
    prods = []
    for val, l, u, a, b in zip(np.concatenate([h, xb]), np.concatenate([lo, blo]), np.concatenate([hi, bhi]),
                               np.concatenate([zl, bz[:, 0]]), np.concatenate([zu, bz[:, 1]])):
        if np.isfinite(l):
            prods.append((val - l) * a)
        if np.isfinite(u):
            prods.append((u - val) * b)
    gap = float(np.mean(np.abs(prods))) if prods else 0.0
    dual_sign = float(max(0.0, -min(np.concatenate([zl, zu, bz.ravel()]), default=0.0)))

    # stationarity of the Lagrangian by central differences
    obj = doc["objective"]
    a1, a2 = obj["alpha1"], obj["alpha2"]
    prev = np.array(obj["q_sh_prev"], dtype=float)
    grad = np.zeros(len(m.v))
    for i in range(len(m.gens)):
        grad[m.col(f"pg:{i}")] += a1
    for i, c in enumerate(m.caps):
        k = m.col(f"qsh:{i}")
        grad[k] += 2.0 * a2 * (m.v[k] - prev[i])
    zin = zu - zl
    for j in range(len(m.v)):
        step = fd_step * max(1.0, abs(m.v[j]))
        vp, vm = m.v.copy(), m.v.copy()
        vp[j] += step
        vm[j] -= step
        dg = (eq_vec(vp) - eq_vec(vm)) / (2 * step)
        dh = (ineq_vec(vp) - ineq_vec(vm)) / (2 * step)
        grad[j] += dg @ eq_mult + dh @ zin
    grad[bcol] += bz[:, 1] - bz[:, 0]
    stat = float(np.abs(grad).max(initial=0.0))

    bal, loss = {}, {}
    for c in m.convs:
        r, lo_c = m.converter_terms(m.v, c)
        bal[c.id], loss[c.id] = float(r), float(lo_c)
    exact = all(any(m.v[m.col(f"qsh:{i}")] == s for s in c.steps) for i, c in enumerate(m.caps))
    return Certificate(feas, gap, stat, dual_sign, bal, loss, exact, notes)


def verify_file(path) -> Certificate:
    return verify_solution(json.loads(Path(path).read_text()))
