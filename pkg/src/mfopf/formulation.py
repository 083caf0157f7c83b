"""Loss-minimizing OPF over a multi-frequency system in rectangular coordinates.

Problem shape::

    min f(x)  s.t.  g(x) = 0,  h_min <= h(x) <= h_max,  x_min <= x[box] <= x_max

Equality rows, in order: active balance (every bus), reactive balance (every
bus), squared-voltage setpoints, converter active balance, slack-bus
imaginary voltage (one per grid), then pinned variables.

Functional inequality rows, in order: squared voltage at buses without a
setpoint, line series-current, line active flow, converter current limit
(side s, side l) and converter modulation limit (side s, side l).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import converter as cv
from .network import (LOAD, MultiFrequencySystem, build_admittance,
                      validate_system)

BIG = 1e6


@dataclass(frozen=True)
class VariableLayout:
    n: int
    blocks: dict
    bus_ids: np.ndarray
    bus_grid: np.ndarray
    e_idx: np.ndarray
    f_idx: np.ndarray
    pg_idx: np.ndarray
    qg_idx: np.ndarray
    qsh_idx: np.ndarray
    ps_idx: np.ndarray
    qs_idx: np.ndarray
    pl_idx: np.ndarray
    ql_idx: np.ndarray

    @property
    def nb(self) -> int:
        return len(self.bus_ids)

    def bus_pos(self, bus_id: int) -> int:
        return int(np.flatnonzero(self.bus_ids == bus_id)[0])


def layout_variables(system: MultiFrequencySystem) -> VariableLayout:
    """Index layout: per grid (e, f) blocks, then per grid (P_gen, Q_gen, Q_sh),
    then converter (p_s, q_s, p_l, q_l) blocks ordered by converter id."""
    blocks = {}
    off = 0
    e_idx, f_idx, bus_ids, bus_grid = [], [], [], []
    for g in system.grids:
        ids = g.bus_ids()
        nb = len(ids)
        blocks[f"e:{g.id}"] = slice(off, off + nb)
        blocks[f"f:{g.id}"] = slice(off + nb, off + 2 * nb)
        e_idx += range(off, off + nb)
        f_idx += range(off + nb, off + 2 * nb)
        bus_ids += ids
        bus_grid += [g.id] * nb
        off += 2 * nb
    pg, qg, qsh = [], [], []
    for g in system.grids:
        ng, nc = len(g.generators), len(g.capacitors)
        blocks[f"pg:{g.id}"] = slice(off, off + ng)
        pg += range(off, off + ng)
        off += ng
        blocks[f"qg:{g.id}"] = slice(off, off + ng)
        qg += range(off, off + ng)
        off += ng
        blocks[f"qsh:{g.id}"] = slice(off, off + nc)
        qsh += range(off, off + nc)
        off += nc
    ncv = len(system.converters)
    conv = {}
    for name in ("ps", "qs", "pl", "ql"):
        blocks[name] = slice(off, off + ncv)
        conv[name] = np.arange(off, off + ncv)
        off += ncv
    a = lambda v: np.asarray(v, dtype=int)
    return VariableLayout(off, blocks, a(bus_ids), a(bus_grid), a(e_idx), a(f_idx),
                          a(pg), a(qg), a(qsh), conv["ps"], conv["qs"], conv["pl"], conv["ql"])


@dataclass(frozen=True)
class ObjectiveSpec:
    alpha1: float = 1.0
    alpha2: float = 0.0
    q_sh_prev: tuple | None = None

    def __post_init__(self):
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be positive")
        if self.alpha2 < 0:
            raise ValueError("alpha2 must be non-negative")


class CacheBudgetError(MemoryError):
    pass


@dataclass
class ConstantHessianCache:
    """Per-row constant Hessians, plus a stacked form for fast weighted sums.

    ``stack`` has one row per structural nonzero of the union pattern and one
    column per cached constraint, so ``stack @ w`` gives the CSR data of the
    weighted sum directly.
    """
    matrices: list            # list of CSR, one per cached constraint row
    stack: sp.csr_matrix
    indptr: np.ndarray
    indices: np.ndarray
    n: int

    def weighted_sum(self, w: np.ndarray) -> sp.csr_matrix:
        data = self.stack @ w
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


def _stack_cache(rows, cols, vals, cid, n, ncons) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    key = rows.astype(np.int64) * n + cols
    uniq, pos = np.unique(key, return_inverse=True)
    stack = sp.csr_matrix((vals, (pos, cid)), shape=(len(uniq), ncons))
    prow, pcol = uniq // n, uniq % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, prow + 1, 1)
    indptr = np.cumsum(indptr)
    return stack, indptr, pcol.astype(np.int64)


class OpfProblem:
    """Assembled OPF for one system, objective and load level.

    ``converter_dispatch=False`` pins the converter quantities that the
    operating modes declare as given (p_s of non-slack converters, q_s, and
    q_l under Q-Vdc), leaving only generators and capacitors to optimize.
    """

    def __init__(self, system: MultiFrequencySystem, objective: ObjectiveSpec | None = None,
                 converter_dispatch: bool = True, use_cache: bool = True,
                 cache_budget: int = 50_000_000):
        rep = validate_system(system)
        if not rep.ok:
            raise ValueError(f"invalid system:\n{rep}")
        self.system = system
        self.objective_spec = objective or ObjectiveSpec()
        self.converter_dispatch = converter_dispatch
        self.use_cache = use_cache
        self.layout = L = layout_variables(system)
        self.n = L.n
        nb = L.nb
        pos = {int(b): i for i, b in enumerate(L.bus_ids)}
        self._pos = pos

        # block-diagonal network matrices over the global bus order
        Gs, Bs = [], []
        for g in system.grids:
            Y = build_admittance(g)
            Gs.append(Y.G)
            Bs.append(Y.B)
        self.G = sp.block_diag(Gs, format="csr") if Gs else sp.csr_matrix((0, 0))
        self.B = sp.block_diag(Bs, format="csr") if Bs else sp.csr_matrix((0, 0))
        Yc = self.G.tocoo()
        Bc = self.B.tocoo()
        assert np.array_equal(Yc.row, Bc.row) and np.array_equal(Yc.col, Bc.col)
        self._yr, self._yc, self._yg, self._yb = Yc.row, Yc.col, Yc.data, Bc.data

        buses = [system.bus(int(b)) for b in L.bus_ids]
        self.buses = buses
        self.p_load = np.array([b.p_load for b in buses])
        self.q_load = np.array([b.q_load for b in buses])

        gens = [gen for g in system.grids for gen in g.generators]
        caps = [cap for g in system.grids for cap in g.capacitors]
        self.generators, self.capacitors = gens, caps
        self.gen_bus = np.array([pos[gen.bus] for gen in gens], dtype=int)
        self.cap_bus = np.array([pos[c.bus] for c in caps], dtype=int)
        convs = system.converters
        self.converters = convs
        self.cs_bus = np.array([pos[c.bus_s] for c in convs], dtype=int)
        self.cl_bus = np.array([pos[c.bus_l] for c in convs], dtype=int)
        prev = self.objective_spec.q_sh_prev
        self.q_sh_prev = np.array(prev if prev is not None else [c.q_prev for c in caps], dtype=float)
        if len(self.q_sh_prev) != len(caps):
            raise ValueError("q_sh_prev length does not match capacitor count")

        # voltage-setpoint set: slack / voltage-controlled buses, then converter-held terminals
        vset: dict[int, float] = {}
        for i, b in enumerate(buses):
            if b.kind != LOAD:
                vset[i] = b.v_ref
        for c in convs:
            if c.is_lf_slack:
                continue
            if c.mode.side1 == "PV":
                vset.setdefault(pos[c.bus_s], c.mode.v_s)
            if c.mode.side2 == "VVdc":
                vset.setdefault(pos[c.bus_l], c.mode.v_l)
        self.v_buses = np.array(sorted(vset), dtype=int)
        self.v_target = np.array([vset[i] for i in self.v_buses], dtype=float)
        self.l_buses = np.array([i for i in range(nb) if i not in vset], dtype=int)
        self.slack_buses = np.array([pos[g.slack_bus.id] for g in system.grids], dtype=int)

        lines = [ln for g in system.grids for ln in g.lines]
        self.lines = lines
        self.ln_k = np.array([pos[ln.from_bus] for ln in lines], dtype=int)
        self.ln_j = np.array([pos[ln.to_bus] for ln in lines], dtype=int)
        self.ln_g = np.array([ln.g for ln in lines], dtype=float)
        self.ln_b = np.array([ln.b for ln in lines], dtype=float)
        self.ln_imax = np.array([ln.i_max for ln in lines], dtype=float)
        self.ln_pmax = np.array([ln.p_max for ln in lines], dtype=float)

        # pinned converter quantities
        fixed = []
        if not converter_dispatch:
            for k, c in enumerate(convs):
                if not c.is_lf_slack:
                    fixed.append((int(L.ps_idx[k]), c.mode.p_s))
                    if c.mode.side1 == "PQ":
                        fixed.append((int(L.qs_idx[k]), c.mode.q_s))
                    if c.mode.side2 == "QVdc":
                        fixed.append((int(L.ql_idx[k]), c.mode.q_l))
                else:
                    fixed.append((int(L.qs_idx[k]), c.mode.q_s))
        self.fixed = fixed

        ncv = len(convs)
        self.row_counts = dict(P=nb, Q=nb, V=len(self.v_buses), conv=ncv,
                               fslack=len(self.slack_buses), fixed=len(fixed))
        self.m_eq = sum(self.row_counts.values())
        nl = len(lines)
        self.ineq_counts = dict(V=len(self.l_buses), I=nl, Pline=nl, Icv_s=ncv, Icv_l=ncv,
                                Mcv_s=ncv, Mcv_l=ncv)
        self.m_ineq = sum(self.ineq_counts.values())
        self.ineq_lower, self.ineq_upper = self._ineq_bounds()
        self.box_index, self.box_lower, self.box_upper = assemble_bounds(self)
        self.discrete = {int(L.qsh_idx[i]): tuple(c.steps) for i, c in enumerate(caps)}

        self._conv_cols = np.stack([L.e_idx[self.cs_bus], L.f_idx[self.cs_bus],
                                    L.e_idx[self.cl_bus], L.f_idx[self.cl_bus],
                                    L.ps_idx, L.qs_idx, L.pl_idx, L.ql_idx], axis=1) \
            if ncv else np.zeros((0, 8), dtype=int)
        self._const_entries = None
        self.cache = precompute_constant_hessians(self, budget=cache_budget) if use_cache else None

    # ------------------------------------------------------------------ helpers
    def split(self, x):
        L = self.layout
        return x[L.e_idx], x[L.f_idx]

    def _ineq_bounds(self):
        lo, hi = [], []
        vb = [self.buses[i] for i in self.l_buses]
        lo.append([b.v_min ** 2 for b in vb])
        hi.append([b.v_max ** 2 for b in vb])
        lo.append(np.full(len(self.lines), -BIG))
        hi.append(self.ln_imax ** 2)
        lo.append(-self.ln_pmax)
        hi.append(self.ln_pmax)
        ncv = len(self.converters)
        for _ in range(4):
            lo.append(np.full(ncv, -BIG))
            hi.append(np.zeros(ncv))
        return np.concatenate(lo).astype(float), np.concatenate(hi).astype(float)

    def conv_vector(self, x, k) -> np.ndarray:
        return x[self._conv_cols[k]]

    # ---------------------------------------------------------------- objective
    def objective(self, x) -> float:
        s = self.objective_spec
        d = x[self.layout.qsh_idx] - self.q_sh_prev
        return float(s.alpha1 * x[self.layout.pg_idx].sum() + s.alpha2 * (d @ d))

    def objective_gradient(self, x) -> np.ndarray:
        s = self.objective_spec
        gr = np.zeros(self.n)
        gr[self.layout.pg_idx] = s.alpha1
        gr[self.layout.qsh_idx] = 2.0 * s.alpha2 * (x[self.layout.qsh_idx] - self.q_sh_prev)
        return gr

    def objective_hessian(self, x=None) -> sp.csr_matrix:
        d = np.zeros(self.n)
        d[self.layout.qsh_idx] = 2.0 * self.objective_spec.alpha2
        return sp.diags(d, format="csr")

    # --------------------------------------------------------------- injections
    def injections(self, x):
        e, f = self.split(x)
        Ie = self.G @ e - self.B @ f
        If = self.G @ f + self.B @ e
        return e * Ie + f * If, f * Ie - e * If, Ie, If

    def _bus_sum(self, bus, vals):
        out = np.zeros(self.layout.nb)
        np.add.at(out, bus, vals)
        return out

    # --------------------------------------------------------------- equalities
    def eq(self, x) -> np.ndarray:
        L = self.layout
        e, f = self.split(x)
        P, Q, _, _ = self.injections(x)
        w = e * e + f * f
        gP = (P - self._bus_sum(self.gen_bus, x[L.pg_idx]) + self.p_load
              + self._bus_sum(self.cs_bus, x[L.ps_idx]) - self._bus_sum(self.cl_bus, x[L.pl_idx]))
        gQ = (Q - self._bus_sum(self.gen_bus, x[L.qg_idx]) + self.q_load
              + self._bus_sum(self.cs_bus, x[L.qs_idx]) - self._bus_sum(self.cl_bus, x[L.ql_idx])
              - w * self._bus_sum(self.cap_bus, x[L.qsh_idx]))
        gV = w[self.v_buses] - self.v_target ** 2
        gC = np.array([cv.balance_residual(self.conv_vector(x, k), c)
                       for k, c in enumerate(self.converters)])
        gF = f[self.slack_buses]
        gX = np.array([x[i] - v for i, v in self.fixed])
        return np.concatenate([gP, gQ, gV, gC, gF, gX])

    def eq_jacobian(self, x) -> sp.csr_matrix:
        L = self.layout
        nb = L.nb
        e, f = self.split(x)
        _, _, Ie, If = self.injections(x)
        r, c, G, B = self._yr, self._yc, self._yg, self._yb
        ek, fk = e[r], f[r]
        diag = np.arange(nb)
        rows = [r, r, nb + r, nb + r, diag, diag, nb + diag, nb + diag]
        cols = [L.e_idx[c], L.f_idx[c], L.e_idx[c], L.f_idx[c],
                L.e_idx, L.f_idx, L.e_idx, L.f_idx]
        vals = [ek * G + fk * B, -ek * B + fk * G, fk * G - ek * B, -fk * B - ek * G,
                Ie, If, -If, Ie]
        ng, ncv = len(self.gen_bus), len(self.converters)
        rows += [self.gen_bus, nb + self.gen_bus, self.cs_bus, self.cl_bus,
                 nb + self.cs_bus, nb + self.cl_bus]
        cols += [L.pg_idx, L.qg_idx, L.ps_idx, L.pl_idx, L.qs_idx, L.ql_idx]
        vals += [-np.ones(ng), -np.ones(ng), np.ones(ncv), -np.ones(ncv), np.ones(ncv), -np.ones(ncv)]
        qb = x[L.qsh_idx]
        cb = self.cap_bus
        rows += [nb + cb, nb + cb, nb + cb]
        cols += [L.e_idx[cb], L.f_idx[cb], L.qsh_idx]
        vals += [-2.0 * e[cb] * qb, -2.0 * f[cb] * qb, -(e[cb] ** 2 + f[cb] ** 2)]
        off = 2 * nb
        vb = self.v_buses
        rv = off + np.arange(len(vb))
        rows += [rv, rv]
        cols += [L.e_idx[vb], L.f_idx[vb]]
        vals += [2.0 * e[vb], 2.0 * f[vb]]
        off += len(vb)
        for k, cp in enumerate(self.converters):
            rows.append(np.full(8, off + k))
            cols.append(self._conv_cols[k])
            vals.append(cv.balance_jacobian(self.conv_vector(x, k), cp))
        off += ncv
        ns = len(self.slack_buses)
        rows.append(off + np.arange(ns))
        cols.append(L.f_idx[self.slack_buses])
        vals.append(np.ones(ns))
        off += ns
        nfx = len(self.fixed)
        rows.append(off + np.arange(nfx))
        cols.append(np.array([i for i, _ in self.fixed], dtype=int))
        vals.append(np.ones(nfx))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.m_eq, self.n))

    # ------------------------------------------------------------- inequalities
    def ineq(self, x) -> np.ndarray:
        e, f = self.split(x)
        w = e * e + f * f
        k, j, g, b = self.ln_k, self.ln_j, self.ln_g, self.ln_b
        de, df = e[k] - e[j], f[k] - f[j]
        hI = (g * g + b * b) * (de * de + df * df)
        hP = g * (w[k] - e[k] * e[j] - f[k] * f[j]) + b * (e[k] * f[j] - f[k] * e[j])
        zs = [self.conv_vector(x, i) for i in range(len(self.converters))]
        cs = self.converters
        return np.concatenate([
            w[self.l_buses], hI, hP,
            [cv.current_limit(z, c, cv.SIDE_S) for z, c in zip(zs, cs)],
            [cv.current_limit(z, c, cv.SIDE_L) for z, c in zip(zs, cs)],
            [cv.modulation_limit(z, c, cv.SIDE_S) for z, c in zip(zs, cs)],
            [cv.modulation_limit(z, c, cv.SIDE_L) for z, c in zip(zs, cs)],
        ])

    def ineq_jacobian(self, x) -> sp.csr_matrix:
        L = self.layout
        e, f = self.split(x)
        lb = self.l_buses
        nlb = len(lb)
        r = np.arange(nlb)
        rows = [r, r]
        cols = [L.e_idx[lb], L.f_idx[lb]]
        vals = [2.0 * e[lb], 2.0 * f[lb]]
        k, j, g, b = self.ln_k, self.ln_j, self.ln_g, self.ln_b
        nl = len(k)
        y2 = g * g + b * b
        de, df = e[k] - e[j], f[k] - f[j]
        rI = nlb + np.arange(nl)
        rows += [rI] * 4
        cols += [L.e_idx[k], L.e_idx[j], L.f_idx[k], L.f_idx[j]]
        vals += [2 * y2 * de, -2 * y2 * de, 2 * y2 * df, -2 * y2 * df]
        rP = nlb + nl + np.arange(nl)
        rows += [rP] * 4
        cols += [L.e_idx[k], L.e_idx[j], L.f_idx[k], L.f_idx[j]]
        vals += [g * (2 * e[k] - e[j]) + b * f[j], -g * e[k] - b * f[k],
                 g * (2 * f[k] - f[j]) - b * e[j], -g * f[k] + b * e[k]]
        off = nlb + 2 * nl
        ncv = len(self.converters)
        kernels = [(cv.current_limit_gradient, cv.SIDE_S), (cv.current_limit_gradient, cv.SIDE_L),
                   (cv.modulation_limit_gradient, cv.SIDE_S), (cv.modulation_limit_gradient, cv.SIDE_L)]
        for fn, side in kernels:
            for i, cp in enumerate(self.converters):
                rows.append(np.full(8, off + i))
                cols.append(self._conv_cols[i])
                vals.append(fn(self.conv_vector(x, i), cp, side))
            off += ncv
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.m_ineq, self.n))

    # ------------------------------------------------------------------ Hessian
    def constant_hessian_entries(self):
        """Triplets (row, col, value, constraint id) for rows with constant Hessians.

        Constraint ids: active balance rows 0..nb-1, reactive nb..2nb-1, voltage
        setpoints next, then squared-voltage bounds, line current, line flow.
        The capacitor term W * Q_sh in reactive balance is cubic and is left to
        :meth:`variable_hessian`.
        """
        L = self.layout
        nb = L.nb
        r, c, G, B = self._yr, self._yc, self._yg, self._yb
        E, F = L.e_idx, L.f_idx
        off = (r == c)
        nd = ~off
        R, C, V, K = [], [], [], []

        def add(rr, cc, vv, kk, sym=True):
            R.append(rr); C.append(cc); V.append(vv); K.append(kk)
            if sym:
                R.append(cc); C.append(rr); V.append(vv); K.append(kk)

        # active balance, row k = r
        rk, cj = r[nd], c[nd]
        add(E[rk], E[cj], G[nd], rk)
        add(F[rk], F[cj], G[nd], rk)
        add(F[rk], E[cj], B[nd], rk)
        add(E[rk], F[cj], -B[nd], rk)
        rd = r[off]
        add(E[rd], E[rd], 2 * G[off], rd, sym=False)
        add(F[rd], F[rd], 2 * G[off], rd, sym=False)
        # reactive balance
        add(F[rk], E[cj], G[nd], nb + rk)
        add(E[rk], F[cj], -G[nd], nb + rk)
        add(E[rk], E[cj], -B[nd], nb + rk)
        add(F[rk], F[cj], -B[nd], nb + rk)
        add(E[rd], E[rd], -2 * B[off], nb + rd, sym=False)
        add(F[rd], F[rd], -2 * B[off], nb + rd, sym=False)
        # voltage setpoints
        vb = self.v_buses
        cid = 2 * nb + np.arange(len(vb))
        add(E[vb], E[vb], np.full(len(vb), 2.0), cid, sym=False)
        add(F[vb], F[vb], np.full(len(vb), 2.0), cid, sym=False)
        base = 2 * nb + len(vb)
        lb = self.l_buses
        cid = base + np.arange(len(lb))
        add(E[lb], E[lb], np.full(len(lb), 2.0), cid, sym=False)
        add(F[lb], F[lb], np.full(len(lb), 2.0), cid, sym=False)
        base += len(lb)
        k, j, g, b = self.ln_k, self.ln_j, self.ln_g, self.ln_b
        nl = len(k)
        y2 = 2 * (g * g + b * b)
        cid = base + np.arange(nl)
        for X in (E, F):
            add(X[k], X[k], y2, cid, sym=False)
            add(X[j], X[j], y2, cid, sym=False)
            add(X[k], X[j], -y2, cid)
        cid = base + nl + np.arange(nl)
        add(E[k], E[k], 2 * g, cid, sym=False)
        add(F[k], F[k], 2 * g, cid, sym=False)
        add(E[k], E[j], -g, cid)
        add(F[k], F[j], -g, cid)
        add(E[k], F[j], b, cid)
        add(E[j], F[k], -b, cid)
        ncons = base + 2 * nl
        return (np.concatenate(R).astype(np.int64), np.concatenate(C).astype(np.int64),
                np.concatenate(V).astype(float), np.concatenate(K).astype(np.int64), ncons)

    def constant_weights(self, y, zh) -> np.ndarray:
        nb = self.layout.nb
        nv = len(self.v_buses)
        nlb, nl = len(self.l_buses), len(self.lines)
        return np.concatenate([y[:2 * nb + nv], zh[:nlb + 2 * nl]])

    def per_constraint_hessians(self) -> list:
        """One CSR matrix per constant-Hessian row (rebuilt from scratch)."""
        R, C, V, K, ncons = self.constant_hessian_entries()
        order = np.argsort(K, kind="stable")
        R, C, V, K = R[order], C[order], V[order], K[order]
        bounds = np.searchsorted(K, np.arange(ncons + 1))
        out = []
        for i in range(ncons):
            s = slice(bounds[i], bounds[i + 1])
            out.append(sp.csr_matrix((V[s], (R[s], C[s])), shape=(self.n, self.n)))
        return out

    def variable_hessian(self, x, y, zh) -> sp.csr_matrix:
        """Capacitor and converter contributions, re-evaluated at every x."""
        L = self.layout
        nb = L.nb
        e, f = self.split(x)
        R, C, V = [], [], []
        cb = self.cap_bus
        if len(cb):
            yq = y[nb + cb]
            qb = x[L.qsh_idx]
            E, F, S = L.e_idx[cb], L.f_idx[cb], L.qsh_idx
            R += [E, F, E, S, F, S]
            C += [E, F, S, E, S, F]
            V += [-2 * qb * yq, -2 * qb * yq, -2 * e[cb] * yq, -2 * e[cb] * yq,
                  -2 * f[cb] * yq, -2 * f[cb] * yq]
        ncv = len(self.converters)
        if ncv:
            row_c = 2 * nb + len(self.v_buses)
            base_h = len(self.l_buses) + 2 * len(self.lines)
            for k, cp in enumerate(self.converters):
                z = self.conv_vector(x, k)
                H = y[row_c + k] * cv.balance_hessian(z, cp)
                H += zh[base_h + k] * cv.capability_hessians(z, cp, cv.SIDE_S, "current")
                H += zh[base_h + ncv + k] * cv.capability_hessians(z, cp, cv.SIDE_L, "current")
                H += zh[base_h + 2 * ncv + k] * cv.capability_hessians(z, cp, cv.SIDE_S, "modulation")
                H += zh[base_h + 3 * ncv + k] * cv.capability_hessians(z, cp, cv.SIDE_L, "modulation")
                cols = self._conv_cols[k]
                R.append(np.repeat(cols, 8))
                C.append(np.tile(cols, 8))
                V.append(H.ravel())
        if not R:
            return sp.csr_matrix((self.n, self.n))
        return sp.csr_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                             shape=(self.n, self.n))

    def constraint_hessian(self, x, y, zh, use_cache: bool | None = None) -> sp.csr_matrix:
        """sum_i y_i Hess g_i + sum_j zh_j Hess h_j."""
        use_cache = self.use_cache if use_cache is None else use_cache
        w = self.constant_weights(y, zh)
        if use_cache and self.cache is not None:
            Hc = self.cache.weighted_sum(w)
        else:
            mats = self.per_constraint_hessians()
            Hc = sp.csr_matrix((self.n, self.n))
            for wi, M in zip(w, mats):
                if wi != 0.0:
                    Hc = Hc + wi * M
        return (Hc + self.variable_hessian(x, y, zh)).tocsr()

    def lagrangian_hessian(self, x, y, zh) -> sp.csr_matrix:
        return (self.objective_hessian(x) + self.constraint_hessian(x, y, zh)).tocsr()

    # ----------------------------------------------------------------- starting
    def flat_start(self) -> np.ndarray:
        L = self.layout
        x = np.zeros(self.n)
        x[L.e_idx] = 1.0
        x[L.e_idx[self.v_buses]] = self.v_target
        lo, hi = self.box_lower, self.box_upper
        mid = np.where((lo > -BIG) & (hi < BIG), 0.5 * (lo + hi), np.clip(0.0, lo, hi))
        x[self.box_index] = mid
        for k, c in enumerate(self.converters):
            if not c.is_lf_slack:
                x[L.ps_idx[k]] = c.mode.p_s
                x[L.pl_idx[k]] = c.mode.p_s
        for i, v in self.fixed:
            x[i] = v
        return x

    def unpack(self, x) -> dict:
        L = self.layout
        e, f = self.split(x)
        return dict(
            bus_ids=L.bus_ids.tolist(), e=e, f=f, vm=np.hypot(e, f),
            pg=x[L.pg_idx], qg=x[L.qg_idx], qsh=x[L.qsh_idx],
            ps=x[L.ps_idx], qs=x[L.qs_idx], pl=x[L.pl_idx], ql=x[L.ql_idx],
        )


def precompute_constant_hessians(problem: OpfProblem, budget: int = 50_000_000) -> ConstantHessianCache:
    R, C, V, K, ncons = problem.constant_hessian_entries()
    if len(V) > budget:
        raise CacheBudgetError(f"constant Hessian cache needs {len(V)} entries (budget {budget})")
    mats = problem.per_constraint_hessians()
    stack, indptr, indices = _stack_cache(R, C, V, K, problem.n, ncons)
    return ConstantHessianCache(mats, stack, indptr, indices, problem.n)


def assemble_bounds(problem: OpfProblem):
    """Box rows over dispatch variables: generator limits, relaxed capacitor
    range, and the converter reactive-absorption limits."""
    L = problem.layout
    idx, lo, hi = [], [], []
    for i, gen in enumerate(problem.generators):
        idx += [L.pg_idx[i], L.qg_idx[i]]
        lo += [gen.p_min, gen.q_min]
        hi += [gen.p_max, gen.q_max]
    for i, cap in enumerate(problem.capacitors):
        idx.append(L.qsh_idx[i])
        lo.append(min(cap.steps))
        hi.append(max(cap.steps))
    for k, c in enumerate(problem.converters):
        qs_max, ql_min = cv.reactive_bounds(c)
        idx += [L.qs_idx[k], L.ql_idx[k]]
        lo += [-BIG, ql_min]
        hi += [qs_max, BIG]
    lo = np.maximum(np.array(lo, dtype=float), -BIG)
    hi = np.minimum(np.array(hi, dtype=float), BIG)
    return np.array(idx, dtype=int), lo, hi


def time_hessian_assembly(problem: OpfProblem, x, y, zh, repeats: int = 20) -> tuple[float, float]:
    """Mean seconds per Lagrangian-Hessian assembly, cached vs rebuilt."""
    out = []
    for cached in (True, False):
        t0 = time.perf_counter()
        for _ in range(repeats):
            problem.constraint_hessian(x, y, zh, use_cache=cached)
        out.append((time.perf_counter() - t0) / repeats)
    return out[0], out[1]
