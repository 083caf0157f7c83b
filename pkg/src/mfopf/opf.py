"""Multi-start OPF driver."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ipm
from .formulation import BIG, ObjectiveSpec, OpfProblem
from .network import MultiFrequencySystem
from .powerflow import PfDivergence, StructuralError, solve_pf

START_ORDER = ("flat", "warm", "prev")


@dataclass
class OpfResult:
    x: np.ndarray
    report: ipm.SolveReport
    problem: OpfProblem
    runs: list = field(default_factory=list)  # (label, SolveReport)

    @property
    def converged(self) -> bool:
        return self.report.converged

    def losses(self) -> float:
        p = self.problem
        return float(self.x[p.layout.pg_idx].sum() - p.p_load.sum())


def push_interior(problem: OpfProblem, x: np.ndarray, margin: float = 1e-4) -> np.ndarray:
    """Move box-constrained entries strictly inside their bounds."""
    x = x.copy()
    lo, hi = problem.box_lower, problem.box_upper
    width = np.where((lo > -BIG) & (hi < BIG), hi - lo, 1.0)
    pad = np.minimum(margin * np.maximum(width, 1e-12), 0.5 * (hi - lo))
    x[problem.box_index] = np.clip(x[problem.box_index], lo + pad, hi - pad)
    return x


def _select(runs):
    ok = [(r.objective, START_ORDER.index(lbl) if lbl in START_ORDER else 99, i)
          for i, (lbl, _, r) in enumerate(runs) if r.converged]
    if ok:
        return min(ok)[2]
    # nothing converged: report the run that got closest to feasibility
    return min(range(len(runs)), key=lambda i: (runs[i][2].feasibility, i))


def multi_start_solve(problem: OpfProblem, opts: ipm.IpmOptions | None = None,
                      x_prev: np.ndarray | None = None, pf_dispatch: dict | None = None,
                      starts: tuple | None = None) -> OpfResult:
    """Solve from each requested start and keep the least-objective converged run."""
    opts = opts or ipm.IpmOptions()
    starts = tuple(starts or opts.starts)
    for s in starts:
        if s not in START_ORDER:
            raise ValueError(f"unknown start {s!r}")
    runs = []
    for label in START_ORDER:
        if label not in starts:
            continue
        if label == "flat":
            x0 = problem.flat_start()
        elif label == "warm":
            try:
                pf = solve_pf(problem.system, pf_dispatch)
            except (PfDivergence, StructuralError) as exc:
                runs.append((label, None, ipm.SolveReport(ipm.NUMERICAL_FAILURE, 0, start=label,
                                                          message=f"warm start unavailable: {exc}")))
                continue
            x0 = pf.x
            for i, v in problem.fixed:
                x0[i] = v
        else:
            if x_prev is None:
                continue
            x0 = x_prev
        x, rep = ipm.solve(problem, push_interior(problem, x0), opts, start=label)
        runs.append((label, x, rep))
    if not runs:
        raise ValueError("no start was run")
    best = _select(runs)
    label, x, rep = runs[best]
    if x is None:
        x = problem.flat_start()
    return OpfResult(x, rep, problem, [(lbl, r) for lbl, _, r in runs])


def run_opf(system: MultiFrequencySystem, objective: ObjectiveSpec | None = None,
            opts: ipm.IpmOptions | None = None, converter_dispatch: bool = True,
            x_prev: np.ndarray | None = None, pf_dispatch: dict | None = None,
            starts: tuple | None = None, use_cache: bool = True) -> OpfResult:
    problem = OpfProblem(system, objective, converter_dispatch=converter_dispatch, use_cache=use_cache)
    return multi_start_solve(problem, opts, x_prev=x_prev, pf_dispatch=pf_dispatch, starts=starts)
