"""Predictor-corrector primal-dual interior-point solver with discrete snapping.

The solver works on any object exposing the problem protocol used by
:class:`mfopf.formulation.OpfProblem` (see :class:`QpProblem` for a minimal
example). Functional inequalities and box rows are merged into one stack
``c(x) = [h(x); x[box]]`` with slacks ``s_l, s_u``::

    c - s_l = lower,   c + s_u = upper,   s, z > 0
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import nearest_step

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
INFEASIBLE_START = "infeasible_start"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class IpmOptions:
    tol_feas: float = 1e-6
    tol_gap: float = 1e-6
    tol_obj: float = 1e-6
    tol_stat: float = 1e-6
    max_iters: int = 200
    step_fraction: float = 0.99995
    sigma_rule: str = "mehrotra"   # or "fixed"
    sigma_fixed: float = 0.1
    slack_floor: float = 1e-2
    bound_push: float = 1e-2       # relative margin for x0 inside its box bounds
    mu0: float = 0.1
    reg_start: float = 1e-10
    reg_growth: float = 100.0
    reg_retries: int = 3
    snap_gap_threshold: float = 1e-3
    snap_beta0: float = 1.0
    snap_growth: float = 10.0
    snap_beta_max: float = 1e9
    snap_tol: float = 1e-6
    snap_max_oscillations: int = 5
    snap_recenter_mu: float = 1e-4  # complementarity restored when the penalty changes
    gap_blowup: float = 1e8
    gap_jump: float = 10.0
    starts: tuple = ("flat", "warm", "prev")

    def __post_init__(self):
        for name in ("tol_feas", "tol_gap", "tol_obj", "tol_stat"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")
        if self.sigma_rule not in ("mehrotra", "fixed"):
            raise ValueError(f"unknown sigma rule {self.sigma_rule!r}")


@dataclass
class IpmState:
    x: np.ndarray
    s_l: np.ndarray
    s_u: np.ndarray
    y: np.ndarray
    z_l: np.ndarray
    z_u: np.ndarray
    mu: float = 0.0

    @property
    def gap(self) -> float:
        m = len(self.s_l) + len(self.s_u)
        if m == 0:
            return 0.0
        return float((self.s_l @ self.z_l + self.s_u @ self.z_u) / m)


@dataclass
class SolveReport:
    status: str
    iterations: int
    feasibility: float = math.inf
    gap: float = math.inf
    objective_change: float = math.inf
    stationarity: float = math.inf
    objective: float = math.nan
    start: str = ""
    snap_activations: int = 0
    log: list = field(default_factory=list)
    duals: dict = field(default_factory=dict)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


class QpProblem:
    """min 1/2 x'Px + q'x  s.t.  A x = b,  l <= C x <= u,  lo <= x[idx] <= hi."""

    def __init__(self, P, q, A=None, b=None, C=None, l=None, u=None,
                 box_index=None, box_lower=None, box_upper=None):
        self.P = sp.csr_matrix(P)
        self.q = np.asarray(q, float)
        self.n = n = len(self.q)
        self.A = sp.csr_matrix(A) if A is not None else sp.csr_matrix((0, n))
        self.b = np.asarray(b, float) if b is not None else np.zeros(0)
        self.C = sp.csr_matrix(C) if C is not None else sp.csr_matrix((0, n))
        self.ineq_lower = np.asarray(l, float) if l is not None else np.zeros(0)
        self.ineq_upper = np.asarray(u, float) if u is not None else np.zeros(0)
        self.box_index = np.asarray(box_index if box_index is not None else [], int)
        self.box_lower = np.asarray(box_lower if box_lower is not None else [], float)
        self.box_upper = np.asarray(box_upper if box_upper is not None else [], float)
        self.m_eq, self.m_ineq = self.A.shape[0], self.C.shape[0]
        self.discrete = {}

    def objective(self, x):
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def objective_gradient(self, x):
        return self.P @ x + self.q

    def objective_hessian(self, x=None):
        return self.P

    def eq(self, x):
        return self.A @ x - self.b

    def eq_jacobian(self, x):
        return self.A

    def ineq(self, x):
        return self.C @ x

    def ineq_jacobian(self, x):
        return self.C

    def constraint_hessian(self, x, y, zh):
        return sp.csr_matrix((self.n, self.n))


class _Snapper:
    """Penalty-to-nearest-step schedule for discrete variables.

    A variable whose distance to its target stops shrinking while the weight
    grows is blocked by some constraint; its target then moves to the adjacent
    step on the other side of the current value.
    """

    def __init__(self, discrete: dict, opts: IpmOptions):
        self.idx = np.array(sorted(discrete), dtype=int)
        self.steps = [tuple(sorted(discrete[i])) for i in self.idx]
        self.opts = opts
        k = len(self.idx)
        self.beta = 0.0
        self.target = np.full(k, np.nan)
        self.prev_target = np.full(k, np.nan)
        self.last_dist = np.full(k, np.inf)
        self.stalls = np.zeros(k, dtype=int)
        self.changes = np.zeros(k, dtype=int)
        self.settled = np.zeros(k, dtype=bool)
        self.fixed = np.zeros(k, dtype=bool)
        self.activations = 0

    @property
    def done(self) -> bool:
        return bool(self.fixed.all())

    def _retarget(self, k, t):
        if t != self.target[k]:
            self.prev_target[k] = self.target[k]
            self.target[k] = t
            self.changes[k] += 1
            self.stalls[k] = 0
            self.last_dist[k] = np.inf

    def _other_side(self, k, v):
        t = self.target[k]
        if v >= t:
            above = [s for s in self.steps[k] if s > t]
            return above[0] if above else None
        below = [s for s in self.steps[k] if s < t]
        return below[-1] if below else None

    def activate(self, x):
        o = self.opts
        self.beta = o.snap_beta0 if self.activations == 0 else self.beta * o.snap_growth
        self.activations += 1
        for k, i in enumerate(self.idx):
            if self.fixed[k] or self.settled[k]:
                continue
            v = x[i]
            if np.isnan(self.target[k]):
                self.target[k] = nearest_step(self.steps[k], v)
                self.last_dist[k] = abs(v - self.target[k])
                continue
            d = abs(v - self.target[k])
            self.stalls[k] = self.stalls[k] + 1 if (d > o.snap_tol and d > 0.5 * self.last_dist[k]) else 0
            self.last_dist[k] = d
            if self.stalls[k] >= 2:
                other = self._other_side(k, v)
                if other is not None:
                    self._retarget(k, other)
            if self.changes[k] > o.snap_max_oscillations:
                # bouncing between two steps: settle on the lower one
                self.target[k] = min(self.target[k], self.prev_target[k])
                self.settled[k] = True

    def ready_to_fix(self, x) -> np.ndarray:
        if self.activations == 0:
            return np.zeros(len(self.idx), dtype=bool)
        close = np.abs(x[self.idx] - self.target) <= self.opts.snap_tol
        forced = self.beta >= self.opts.snap_beta_max
        return ~self.fixed & (close | forced)

    def penalty(self, x):
        free = ~self.fixed
        if self.beta == 0 or not free.any():
            return 0.0, None, None
        i = self.idx[free]
        d = x[i] - self.target[free]
        return self.beta * float(d @ d), (i, 2 * self.beta * d), (i, np.full(len(i), 2 * self.beta))


class _Augmented:
    """Problem view with snapping penalty, pinned discrete rows and active box rows."""

    def __init__(self, prob, snapper: _Snapper):
        self.p = prob
        self.sn = snapper
        self.n = prob.n
        self.m_h = prob.m_ineq
        self.box_active = np.ones(len(prob.box_index), dtype=bool)
        self.fix_idx = np.zeros(0, dtype=int)
        self.fix_val = np.zeros(0)
        self._E = None

    def _box_matrix(self):
        if self._E is None:
            bi = self.p.box_index[self.box_active]
            self._E = sp.csr_matrix((np.ones(len(bi)), (np.arange(len(bi)), bi)),
                                    shape=(len(bi), self.n))
        return self._E

    @property
    def lower(self):
        return np.concatenate([self.p.ineq_lower, self.p.box_lower[self.box_active]])

    @property
    def upper(self):
        return np.concatenate([self.p.ineq_upper, self.p.box_upper[self.box_active]])

    @property
    def m_eq(self):
        return self.p.m_eq + len(self.fix_idx)

    def f(self, x):
        return self.p.objective(x) + self.sn.penalty(x)[0]

    def grad(self, x):
        g = self.p.objective_gradient(x).copy()
        _, pg, _ = self.sn.penalty(x)
        if pg is not None:
            np.add.at(g, pg[0], pg[1])
        return g

    def g(self, x):
        return np.concatenate([self.p.eq(x), x[self.fix_idx] - self.fix_val])

    def jg(self, x):
        J = self.p.eq_jacobian(x)
        if len(self.fix_idx):
            F = sp.csr_matrix((np.ones(len(self.fix_idx)), (np.arange(len(self.fix_idx)), self.fix_idx)),
                              shape=(len(self.fix_idx), self.n))
            J = sp.vstack([J, F], format="csr")
        return J

    def c(self, x):
        return np.concatenate([self.p.ineq(x), x[self.p.box_index[self.box_active]]])

    def jc(self, x):
        return sp.vstack([self.p.ineq_jacobian(x), self._box_matrix()], format="csr")

    def hess(self, x, y, z_net):
        H = self.p.objective_hessian(x) + self.p.constraint_hessian(x, y[:self.p.m_eq], z_net[:self.m_h])
        _, _, ph = self.sn.penalty(x)
        if ph is not None:
            d = np.zeros(self.n)
            np.add.at(d, ph[0], ph[1])
            H = H + sp.diags(d)
        return sp.csr_matrix(H)

    def fix(self, state: IpmState, which: np.ndarray):
        """Pin discrete entries to their targets; drop their box rows from the state."""
        sn = self.sn
        new_idx = sn.idx[which]
        new_val = sn.target[which]
        state.x[new_idx] = new_val
        sn.fixed |= which
        self.fix_idx = np.concatenate([self.fix_idx, new_idx]).astype(int)
        self.fix_val = np.concatenate([self.fix_val, new_val])
        state.y = np.concatenate([state.y, np.zeros(len(new_idx))])
        drop = np.isin(self.p.box_index, new_idx) & self.box_active
        keep_rows = np.ones(self.m_h + int(self.box_active.sum()), dtype=bool)
        keep_rows[self.m_h + np.flatnonzero(drop[self.box_active])] = False
        for name in ("s_l", "s_u", "z_l", "z_u"):
            setattr(state, name, getattr(state, name)[keep_rows])
        self.box_active &= ~drop
        self._E = None


def kkt_assemble(H, Jg, Jc, D) -> sp.csc_matrix:
    """Reduced augmented system [[H + Jc' D Jc, Jg'], [Jg, 0]]."""
    K11 = H + Jc.T @ sp.diags(D) @ Jc
    m = Jg.shape[0]
    return sp.bmat([[K11, Jg.T], [Jg, sp.csr_matrix((m, m))]], format="csc")


class KktFactorization:
    def __init__(self, K: sp.csc_matrix, n: int, opts: IpmOptions):
        self.reg = 0.0
        delta = opts.reg_start
        last = None
        for attempt in range(opts.reg_retries + 1):
            try:
                Kr = K if attempt == 0 else K + sp.diags(
                    np.concatenate([np.full(n, delta), np.zeros(K.shape[0] - n)]), format="csc")
                self.lu = spla.splu(Kr)
                if attempt:
                    self.reg = delta
                    delta *= opts.reg_growth
                return
            except RuntimeError as exc:
                last = exc
                if attempt:
                    delta *= opts.reg_growth
        raise np.linalg.LinAlgError(f"KKT factorization failed after regularization: {last}")

    def solve(self, rhs):
        out = self.lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise np.linalg.LinAlgError("non-finite KKT step")
        return out


def kkt_solve(K: sp.csc_matrix, rhs: np.ndarray, n: int | None = None,
              opts: IpmOptions | None = None) -> np.ndarray:
    return KktFactorization(K, K.shape[0] if n is None else n, opts or IpmOptions()).solve(rhs)


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not neg.any():
        return math.inf
    return float(np.min(-v[neg] / dv[neg]))


def step_lengths(state: IpmState, d: dict, gamma: float) -> tuple[float, float]:
    """Fraction-to-boundary step lengths for primal (slacks) and dual variables."""
    ap = min(_max_step(state.s_l, d["s_l"]), _max_step(state.s_u, d["s_u"]))
    ad = min(_max_step(state.z_l, d["z_l"]), _max_step(state.z_u, d["z_u"]))
    return gamma * min(1.0, ap), gamma * min(1.0, ad)


@dataclass
class _Linearization:
    H: sp.csr_matrix
    Jg: sp.csr_matrix
    Jc: sp.csr_matrix
    r_d: np.ndarray
    r_g: np.ndarray
    r_l: np.ndarray
    r_u: np.ndarray


def _linearize(aug: _Augmented, st: IpmState) -> _Linearization:
    x = st.x
    Jg, Jc = aug.jg(x), aug.jc(x)
    cx = aug.c(x)
    znet = st.z_u - st.z_l
    r_d = aug.grad(x) + Jg.T @ st.y + Jc.T @ znet
    return _Linearization(aug.hess(x, st.y, znet), Jg, Jc, r_d, aug.g(x),
                          cx - st.s_l - aug.lower, cx + st.s_u - aug.upper)


def _direction(fac, lin: _Linearization, st: IpmState, rc_l, rc_u, n) -> dict:
    w = (rc_u + st.z_u * lin.r_u) / st.s_u - (rc_l - st.z_l * lin.r_l) / st.s_l
    rhs = np.concatenate([-lin.r_d - lin.Jc.T @ w, -lin.r_g])
    sol = fac.solve(rhs)
    dx, dy = sol[:n], sol[n:]
    jdx = lin.Jc @ dx
    ds_l = jdx + lin.r_l
    ds_u = -lin.r_u - jdx
    dz_l = (rc_l - st.z_l * ds_l) / st.s_l
    dz_u = (rc_u - st.z_u * ds_u) / st.s_u
    return dict(x=dx, y=dy, s_l=ds_l, s_u=ds_u, z_l=dz_l, z_u=dz_u)


def predictor_corrector_step(aug, st: IpmState, opts: IpmOptions, lin: _Linearization | None = None):
    """Affine predictor (mu = 0), then a centered corrector on the same factorization.

    Returns (affine direction, corrected direction, sigma * mu).
    """
    lin = lin or _linearize(aug, st)
    n = aug.n
    with np.errstate(over="ignore", divide="ignore"):
        D = st.z_l / st.s_l + st.z_u / st.s_u
    if not np.all(np.isfinite(D)):
        raise np.linalg.LinAlgError("barrier scaling overflowed")
    fac = KktFactorization(kkt_assemble(lin.H, lin.Jg, lin.Jc, D), n, opts)
    aff = _direction(fac, lin, st, -st.s_l * st.z_l, -st.s_u * st.z_u, n)
    mu = st.gap
    if opts.sigma_rule == "mehrotra" and mu > 0:
        ap, ad = step_lengths(st, aff, 1.0)
        m = len(st.s_l) + len(st.s_u)
        gap_aff = ((st.s_l + ap * aff["s_l"]) @ (st.z_l + ad * aff["z_l"])
                   + (st.s_u + ap * aff["s_u"]) @ (st.z_u + ad * aff["z_u"])) / m
        sigma = float(np.clip((gap_aff / mu) ** 3, 0.0, 1.0))
        # second-order term, scaled by the affine steps actually attainable
        w = ap * ad
        corr_l, corr_u = w * aff["s_l"] * aff["z_l"], w * aff["s_u"] * aff["z_u"]
    else:
        sigma = opts.sigma_fixed
        corr_l, corr_u = 0.0, 0.0
    smu = sigma * mu
    cor = _direction(fac, lin, st, smu - st.s_l * st.z_l - corr_l, smu - st.s_u * st.z_u - corr_u, n)
    if opts.sigma_rule == "mehrotra" and mu > 0:
        # safeguard: a second-order term that cripples the step is dropped
        cen = _direction(fac, lin, st, smu - st.s_l * st.z_l, smu - st.s_u * st.z_u, n)
        if _usable_step(st, cen, opts) > _usable_step(st, cor, opts):
            cor = cen
    return aff, cor, smu


def _recenter(st: IpmState, mu: float):
    """Lift every complementarity product below ``mu`` back to ``mu``.

    A relaxation solved to high accuracy leaves no interior room for the
    penalised problem; the larger member of each pair is kept (or raised to
    sqrt(mu)) and the other is set to close the product.
    """
    r = math.sqrt(mu)
    for sname, zname in (("s_l", "z_l"), ("s_u", "z_u")):
        s, z = getattr(st, sname).copy(), getattr(st, zname).copy()
        low = s * z < mu
        big_s = low & (s >= z)
        big_z = low & (s < z)
        s[big_s] = np.maximum(s[big_s], r)
        z[big_s] = mu / s[big_s]
        z[big_z] = np.maximum(z[big_z], r)
        s[big_z] = mu / z[big_z]
        setattr(st, sname, s)
        setattr(st, zname, z)


def _usable_step(st: IpmState, d: dict, opts: IpmOptions) -> float:
    ap, ad = step_lengths(st, d, opts.step_fraction)
    return min(_limit_gap_growth(st, d, ap, ad, opts.gap_jump))


def _limit_gap_growth(st: IpmState, d: dict, ap: float, ad: float, factor: float,
                      max_halvings: int = 30) -> tuple[float, float]:
    """Shorten both steps until the complementarity gap grows at most ``factor``-fold."""
    m = len(st.s_l) + len(st.s_u)
    if m == 0:
        return ap, ad
    cap = factor * st.gap
    for _ in range(max_halvings):
        new = ((st.s_l + ap * d["s_l"]) @ (st.z_l + ad * d["z_l"])
               + (st.s_u + ap * d["s_u"]) @ (st.z_u + ad * d["z_u"])) / m
        if new <= cap:
            break
        ap, ad = 0.5 * ap, 0.5 * ad
    return ap, ad


def _push_into_box(p, x, kappa):
    if not len(p.box_index) or kappa <= 0:
        return x
    lo, hi = p.box_lower, p.box_upper
    pad = np.minimum(kappa * np.maximum(1.0, np.abs(np.where(np.isfinite(lo), lo, 0.0))),
                     0.5 * kappa * (hi - lo))
    pad_u = np.minimum(kappa * np.maximum(1.0, np.abs(np.where(np.isfinite(hi), hi, 0.0))),
                       0.5 * kappa * (hi - lo))
    xb = x[p.box_index]
    x[p.box_index] = np.where(hi > lo, np.clip(xb, lo + pad, hi - pad_u), xb)
    return x


def initial_state(aug: _Augmented, x0: np.ndarray, opts: IpmOptions) -> IpmState:
    x = _push_into_box(aug.p, np.array(x0, dtype=float), opts.bound_push)
    cx = aug.c(x)
    s_l = np.maximum(cx - aug.lower, opts.slack_floor)
    s_u = np.maximum(aug.upper - cx, opts.slack_floor)
    return IpmState(x, s_l, s_u, np.zeros(aug.m_eq), opts.mu0 / s_l, opts.mu0 / s_u, opts.mu0)


def _measures(aug, st, lin):
    cx = aug.c(st.x)
    viol = np.concatenate([aug.lower - cx, cx - aug.upper, [0.0]]).max()
    feas = max(_inf(lin.r_g), _inf(lin.r_l), _inf(lin.r_u), viol)
    return feas, st.gap, _inf(lin.r_d)


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


def solve(problem, x0: np.ndarray, opts: IpmOptions | None = None, start: str = "") -> tuple[np.ndarray, SolveReport]:
    """Run the interior-point iteration from ``x0``."""
    opts = opts or IpmOptions()
    if np.any(problem.box_lower > problem.box_upper) or np.any(problem.ineq_lower > problem.ineq_upper):
        return np.array(x0, float), SolveReport(INFEASIBLE_START, 0, start=start,
                                                message="lower bound exceeds upper bound")
    sn = _Snapper(getattr(problem, "discrete", {}) or {}, opts)
    aug = _Augmented(problem, sn)
    st = initial_state(aug, x0, opts)
    rep = SolveReport(MAX_ITERS, 0, start=start)
    dobj = math.inf
    gap0 = max(st.gap, 1.0)
    try:
        for k in range(opts.max_iters + 1):
            lin = _linearize(aug, st)
            feas, gap, stat = _measures(aug, st, lin)
            f_now = aug.f(st.x)
            if not (np.isfinite(feas) and np.isfinite(f_now)):
                raise np.linalg.LinAlgError("non-finite iterate")
            rep.iterations, rep.feasibility, rep.gap, rep.stationarity = k, feas, gap, stat
            rep.objective_change, rep.objective = dobj, problem.objective(st.x)
            if (feas <= opts.tol_feas and gap <= opts.tol_gap and dobj <= opts.tol_obj
                    and stat <= opts.tol_stat and sn.done):
                rep.status = CONVERGED
                break
            if k == opts.max_iters:
                break
            if gap > opts.gap_blowup * gap0:
                raise np.linalg.LinAlgError(f"complementarity gap diverged ({gap:.3e})")
            # discrete handling: fix settled entries, then (re)activate the penalty
            # snap only once the relaxation is nearly solved, so targets reflect its optimum
            thr = opts.snap_gap_threshold
            if len(sn.idx) and not sn.done and gap <= thr and (sn.activations or max(feas, stat) <= thr):
                ready = sn.ready_to_fix(st.x)
                if ready.any():
                    aug.fix(st, ready)
                if not sn.done:
                    sn.activate(st.x)
                    _recenter(st, opts.snap_recenter_mu)
                lin = _linearize(aug, st)
                f_now = aug.f(st.x)
            aff, d, smu = predictor_corrector_step(aug, st, opts, lin)
            ap, ad = step_lengths(st, d, opts.step_fraction)
            ap, ad = _limit_gap_growth(st, d, ap, ad, opts.gap_jump)
            st.x = st.x + ap * d["x"]
            st.x[aug.fix_idx] = aug.fix_val
            st.s_l = st.s_l + ap * d["s_l"]
            st.s_u = st.s_u + ap * d["s_u"]
            st.y = st.y + ad * d["y"]
            st.z_l = st.z_l + ad * d["z_l"]
            st.z_u = st.z_u + ad * d["z_u"]
            st.mu = smu
            f_next = aug.f(st.x)
            dobj = abs(f_next - f_now) / max(1.0, abs(f_next))
            line = (f"iter {k}: feas={feas:.3e} gap={gap:.3e} obj={problem.objective(st.x):.8e} "
                    f"alpha_p={ap:.4f} alpha_d={ad:.4f}")
            rep.log.append(line)
            log.debug(line)
    except np.linalg.LinAlgError as exc:
        rep.status = NUMERICAL_FAILURE
        rep.message = str(exc)
    rep.snap_activations = sn.activations
    if sn.done and len(sn.idx):
        st.x[aug.fix_idx] = aug.fix_val
    rep.duals = _export_duals(aug, st)
    return st.x, rep


def _export_duals(aug: _Augmented, st: IpmState) -> dict:
    """Multipliers mapped back onto the original problem rows."""
    p = aug.p
    mh = aug.m_h
    nbox = len(p.box_index)
    zl_box, zu_box = np.zeros(nbox), np.zeros(nbox)
    act = np.flatnonzero(aug.box_active)
    if len(st.z_l) == mh + len(act):
        zl_box[act] = st.z_l[mh:]
        zu_box[act] = st.z_u[mh:]
    return dict(
        y=st.y[:p.m_eq].copy(),
        z_l_ineq=st.z_l[:mh].copy(), z_u_ineq=st.z_u[:mh].copy(),
        z_l_box=zl_box, z_u_box=zu_box,
        fixed_index=aug.fix_idx.copy(), fixed_value=aug.fix_val.copy(),
        y_fixed=st.y[p.m_eq:].copy(),
    )
