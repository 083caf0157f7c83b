"""Newton power flow for fixed dispatch, sharing the OPF residual kernels.

The unknowns are all bus voltages plus the quantities the control modes leave
free: slack-generator P and Q, the reactive output of the first generator at
each voltage-controlled bus, and per converter the entries its mode does not
prescribe.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .converter import converter_losses
from .formulation import OpfProblem
from .network import LOAD, SLACK, MultiFrequencySystem


class StructuralError(ValueError):
    """The mode assignment does not give a square Newton system."""


class PfDivergence(RuntimeError):
    pass


@dataclass
class PfSolution:
    x: np.ndarray
    bus_ids: list
    e: np.ndarray
    f: np.ndarray
    iterations: int
    max_residual: float
    converged: bool
    p_s_slack: np.ndarray
    p_l_slack: np.ndarray
    q_l_slack: np.ndarray
    problem: OpfProblem

    @property
    def vm(self) -> np.ndarray:
        return np.hypot(self.e, self.f)

    def losses(self) -> float:
        """Total active losses (lines plus converters) in per-unit."""
        p = self.problem
        return float(self.x[p.layout.pg_idx].sum() - p.p_load.sum())


def with_modes(system: MultiFrequencySystem, modes: dict | None) -> MultiFrequencySystem:
    if not modes:
        return system
    convs = tuple(dataclasses.replace(c, mode=modes.get(c.id, c.mode)) for c in system.converters)
    return dataclasses.replace(system, converters=convs)


def classify_unknowns(problem: OpfProblem) -> np.ndarray:
    """Column indices of the Newton unknowns; raises if the system is not square."""
    L = problem.layout
    sys = problem.system
    pos = problem._pos
    cols = list(L.e_idx) + list(L.f_idx)
    slack_conv_bus = {pos[c.bus_l] for c in problem.converters if c.is_lf_slack}
    first_gen = {}
    for i, b in enumerate(problem.gen_bus):
        first_gen.setdefault(int(b), i)
    for g in sys.grids:
        sb = pos[g.slack_bus.id]
        if sb in slack_conv_bus:
            continue
        if sb not in first_gen:
            raise StructuralError(f"grid {g.id}: slack bus {g.slack_bus.id} has no generator or slack converter")
        cols += [L.pg_idx[first_gen[sb]], L.qg_idx[first_gen[sb]]]
    conv_v_bus = set()
    for k, c in enumerate(problem.converters):
        if c.is_lf_slack:
            cols += [L.ps_idx[k], L.pl_idx[k], L.ql_idx[k]]
            continue
        cols.append(L.pl_idx[k])
        if c.mode.side1 == "PV":
            cols.append(L.qs_idx[k])
            conv_v_bus.add(pos[c.bus_s])
        if c.mode.side2 == "VVdc":
            cols.append(L.ql_idx[k])
            conv_v_bus.add(pos[c.bus_l])
    for i, b in enumerate(problem.buses):
        if b.kind != LOAD and b.kind != SLACK and i not in conv_v_bus:
            if i not in first_gen:
                raise StructuralError(f"bus {b.id}: voltage-controlled without a generator")
            cols.append(L.qg_idx[first_gen[i]])
    cols = np.array(cols, dtype=int)
    if len(np.unique(cols)) != len(cols):
        raise StructuralError("a quantity is claimed as unknown twice")
    m = problem.m_eq
    if len(cols) != m:
        raise StructuralError(f"{len(cols)} unknowns for {m} equations")
    return cols


def dispatch_vector(problem: OpfProblem, dispatch: dict | None = None) -> np.ndarray:
    """Starting point holding the given dispatch: generator set-points, capacitor
    previous steps, converter set-points; voltages at v_ref or 1.0."""
    L = problem.layout
    dispatch = dispatch or {}
    x = np.zeros(problem.n)
    x[L.e_idx] = 1.0
    x[L.e_idx[problem.v_buses]] = problem.v_target
    x[L.pg_idx] = dispatch.get("pg", [g.p_set for g in problem.generators])
    x[L.qg_idx] = dispatch.get("qg", [g.q_set for g in problem.generators])
    x[L.qsh_idx] = dispatch.get("qsh", problem.q_sh_prev)
    for k, c in enumerate(problem.converters):
        m = c.mode
        x[L.ps_idx[k]] = m.p_s
        x[L.pl_idx[k]] = m.p_s
        x[L.qs_idx[k]] = m.q_s
        x[L.ql_idx[k]] = m.q_l
    for key in ("ps", "qs", "ql"):
        if key in dispatch:
            x[getattr(L, f"{key}_idx")] = dispatch[key]
    return x


def solve_pf(system: MultiFrequencySystem, dispatch: dict | None = None, modes: dict | None = None,
             tol: float = 1e-8, max_iters: int = 30, x0: np.ndarray | None = None) -> PfSolution:
    if tol <= 0:
        raise ValueError("tol must be positive")
    system = with_modes(system, modes)
    prob = OpfProblem(system, use_cache=False)
    cols = classify_unknowns(prob)
    x = dispatch_vector(prob, dispatch) if x0 is None else np.array(x0, dtype=float)
    F = prob.eq(x)
    norm = np.max(np.abs(F)) if len(F) else 0.0
    growth = 0
    it = 0
    while norm > tol:
        if it >= max_iters:
            raise PfDivergence(f"power flow did not converge in {max_iters} iterations "
                               f"(residual {norm:.3e})")
        J = prob.eq_jacobian(x)[:, cols].tocsc()
        try:
            dx = spla.splu(J).solve(-F)
        except RuntimeError as exc:
            raise PfDivergence(f"singular power-flow Jacobian: {exc}") from None
        t = 1.0
        for _ in range(5):
            xn = x.copy()
            xn[cols] += t * dx
            Fn = prob.eq(xn)
            nn = np.max(np.abs(Fn))
            if nn < norm:
                break
            t *= 0.5
        growth = growth + 1 if nn > norm else 0
        if growth >= 5 or not np.isfinite(nn):
            raise PfDivergence(f"power-flow residual grew for {growth} consecutive iterations")
        x, F, norm = xn, Fn, nn
        it += 1
    L = prob.layout
    sk = [k for k, c in enumerate(prob.converters) if c.is_lf_slack]
    e, f = prob.split(x)
    return PfSolution(x, L.bus_ids.tolist(), e, f, it, float(norm), True,
                      x[L.ps_idx[sk]], x[L.pl_idx[sk]], x[L.ql_idx[sk]], prob)


def converter_loss_table(sol: PfSolution) -> list:
    out = []
    for k, c in enumerate(sol.problem.converters):
        out.append(converter_losses(sol.problem.conv_vector(sol.x, k), c).total)
    return out
