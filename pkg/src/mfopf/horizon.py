"""Multi-step runs over a load profile with capacitor state chained between steps."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ipm
from .converter import converter_losses
from .formulation import ObjectiveSpec, OpfProblem
from .network import LOAD, MultiFrequencySystem, scale_loads
from .opf import run_opf
from .powerflow import PfDivergence, StructuralError, solve_pf, with_modes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoadProfile:
    multipliers: tuple
    labels: tuple = ()

    def __post_init__(self):
        if not self.multipliers:
            raise ValueError("load profile is empty")
        if any(m < 0 for m in self.multipliers):
            raise ValueError("load multipliers must be non-negative")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(len(self.multipliers))))
        elif len(self.labels) != len(self.multipliers):
            raise ValueError("labels and multipliers differ in length")

    def __len__(self):
        return len(self.multipliers)


@dataclass
class StepResult:
    step: int
    label: str
    multiplier: float
    status: str
    failed: bool
    objective: float
    demand_mw: float
    losses_mw: float
    losses_pct: float
    v_max: float
    v_min: float
    violations: int
    q_sh: list
    q_sh_prev: list
    generators: list
    converters: list
    voltages: list
    start: str = ""
    iterations: int = 0
    log: list = field(default_factory=list)


@dataclass
class HorizonResult:
    mode: str
    alphas: tuple
    steps: list
    capacitor_buses: list
    base_mva: float

    @property
    def switching_counts(self) -> list:
        return switching_counts(self.steps)

    def total_losses_mwh(self) -> float:
        return float(sum(s.losses_mw for s in self.steps))


def switching_counts(steps) -> list:
    if not steps:
        return []
    counts = np.zeros(len(steps[0].q_sh), dtype=int)
    for s in steps:
        counts += np.array(s.q_sh) != np.array(s.q_sh_prev)
    return counts.tolist()


def scaled_dispatch(system: MultiFrequencySystem, factor: float) -> dict:
    """Generator set-points for a PF run at a scaled load level.

    Set-points of generators in grids that serve load follow the profile;
    generators in load-free grids keep their case values.
    """
    pg = []
    for g in system.grids:
        serves = any(b.p_load != 0 for b in g.buses)
        pg += [gen.p_set * (factor if serves else 1.0) for gen in g.generators]
    return {"pg": pg}


def scaled_modes(system: MultiFrequencySystem, factor: float) -> dict:
    """Converter schedules scaled like the load; voltage set-points are unchanged."""
    out = {}
    for c in system.converters:
        m = c.mode
        out[c.id] = dataclasses.replace(
            m, **{k: getattr(m, k) * factor for k in ("p_s", "q_s", "q_l") if getattr(m, k) is not None})
    return out


def _step_record(problem: OpfProblem, x, step, label, mult, status, failed, objective,
                 q_prev, start="", iterations=0, logs=()) -> StepResult:
    base = problem.system.base_mva
    L = problem.layout
    e, f = problem.split(x)
    vm = np.hypot(e, f)
    load_bus = np.array([b.kind == LOAD for b in problem.buses])
    vmin = np.array([b.v_min for b in problem.buses])
    vmax = np.array([b.v_max for b in problem.buses])
    viol = int(np.sum(load_bus & ((vm > vmax + 1e-6) | (vm < vmin - 1e-6))))
    demand = float(problem.p_load.sum())
    losses = float(x[L.pg_idx].sum() - demand)
    convs = []
    for k, c in enumerate(problem.converters):
        z = problem.conv_vector(x, k)
        convs.append(dict(id=c.id, name=c.name, p_s=z[4] * base, q_s=z[5] * base,
                          v_s=float(np.hypot(z[0], z[1])), p_l=z[6] * base, q_l=z[7] * base,
                          v_l=float(np.hypot(z[2], z[3])),
                          losses=converter_losses(z, c).total * base))
    gens = [dict(bus=g.bus, p=float(x[L.pg_idx[i]] * base), q=float(x[L.qg_idx[i]] * base))
            for i, g in enumerate(problem.generators)]
    volts = [dict(bus=int(b), vm=float(vm[i]), va_deg=float(np.degrees(np.arctan2(f[i], e[i]))))
             for i, b in enumerate(L.bus_ids)]
    sel = vm[load_bus] if load_bus.any() else vm
    return StepResult(
        step=step, label=label, multiplier=mult, status=status, failed=failed, objective=objective,
        demand_mw=demand * base, losses_mw=losses * base,
        losses_pct=100.0 * losses / demand if demand > 0 else 0.0,
        v_max=float(sel.max()), v_min=float(sel.min()), violations=viol,
        q_sh=[float(v) for v in x[L.qsh_idx]], q_sh_prev=[float(v) for v in q_prev],
        generators=gens, converters=convs, voltages=volts, start=start, iterations=iterations,
        log=list(logs),
    )


def _fallback_point(problem: OpfProblem, system: MultiFrequencySystem, dispatch: dict) -> np.ndarray:
    # no earlier dispatch to carry: use the scheduled power flow, else a flat start
    try:
        return solve_pf(system, dispatch).x
    except (PfDivergence, StructuralError):
        return problem.flat_start()


def run_horizon(system: MultiFrequencySystem, profile: LoadProfile, mode: str = "opf",
                alphas: tuple = (1.0, 0.0), opts: ipm.IpmOptions | None = None,
                converter_dispatch: bool = True, starts: tuple | None = None,
                pf_tol: float = 1e-8) -> HorizonResult:
    """Solve each step in order; a failed step keeps the previous dispatch and is flagged."""
    if mode not in ("pf", "opf"):
        raise ValueError(f"mode must be 'pf' or 'opf', got {mode!r}")
    opts = opts or ipm.IpmOptions()
    q_prev = np.array([c.q_prev for g in system.grids for c in g.capacitors], dtype=float)
    steps = []
    x_prev = None
    for t, (mult, label) in enumerate(zip(profile.multipliers, profile.labels)):
        sys_t = with_modes(scale_loads(system, mult), scaled_modes(system, mult))
        disp = scaled_dispatch(system, mult)
        disp["qsh"] = q_prev
        if mode == "pf":
            prob = OpfProblem(sys_t, ObjectiveSpec(*alphas, q_sh_prev=tuple(q_prev)), use_cache=False)
            try:
                sol = solve_pf(sys_t, disp, tol=pf_tol)
                x, status, failed, its = sol.x, "converged", False, sol.iterations
            except (PfDivergence, StructuralError) as exc:
                log.warning("step %d: power flow failed: %s", t, exc)
                x = x_prev if x_prev is not None else prob.flat_start()
                status, failed, its = "failed", True, 0
            rec = _step_record(prob, x, t, label, mult, status, failed, prob.objective(x), q_prev,
                               iterations=its)
        else:
            res = run_opf(sys_t, ObjectiveSpec(*alphas, q_sh_prev=tuple(q_prev)), opts,
                          converter_dispatch=converter_dispatch, x_prev=x_prev, pf_dispatch=disp,
                          starts=starts)
            failed = not res.converged
            x = res.x
            if failed:
                log.warning("step %d: OPF did not converge (%s); carrying previous dispatch",
                            t, res.report.status)
                x = x_prev.copy() if x_prev is not None else _fallback_point(res.problem, sys_t, disp)
                x[res.problem.layout.qsh_idx] = q_prev
            rec = _step_record(res.problem, x, t, label, mult, res.report.status, failed,
                               res.problem.objective(x), q_prev, start=res.report.start,
                               iterations=res.report.iterations, logs=res.report.log)
        steps.append(rec)
        q_prev = np.array(rec.q_sh)
        x_prev = x
    cap_buses = [c.bus for g in system.grids for c in g.capacitors]
    return HorizonResult(mode, tuple(alphas), steps, cap_buses, system.base_mva)


SUMMARY_COLUMNS = ("step", "label", "demand_mw", "losses_mw", "losses_pct", "v_max", "v_min",
                   "violations", "status")


def summarize(result: HorizonResult) -> list:
    if not result.steps:
        raise ValueError("empty horizon")
    return [{k: getattr(s, k) for k in SUMMARY_COLUMNS} for s in result.steps]


def losses_percent(losses_mw: float, demand_mw: float) -> float:
    return 100.0 * losses_mw / demand_mw if demand_mw > 0 else 0.0
