"""Back-to-back converter steady-state model.

Each converter couples bus ``bus_s`` (VSC1 side, power drawn from that grid)
with bus ``bus_l`` (VSC2 side, power injected into that grid). Local variable
order used by every derivative kernel in this module::

    0 e_s, 1 f_s, 2 e_l, 3 f_l, 4 p_s, 5 q_s, 6 p_l, 7 q_l

The shunt filter branch is carried in the data model only; none of the
constraint expressions include it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: floor inside sqrt(p^2 + q^2 + eps^2), used by derivative kernels only
S_EPS = 1e-8

SIDE_S = "s"
SIDE_L = "l"
_SIDE_IDX = {SIDE_S: (0, 1, 4, 5), SIDE_L: (2, 3, 6, 7)}


@dataclass(frozen=True)
class ConverterMode:
    """Power-flow control mode of one converter.

    ``side1`` is ``"PQ"`` or ``"PV"`` and ``side2`` is ``"QVdc"`` or ``"VVdc"``.
    A slack converter ignores ``side1``/``p_s`` (only ``q_s`` is held) and
    regulates the LF slack bus voltage at ``v_l``.
    """

    side1: str = "PQ"
    side2: str = "QVdc"
    p_s: float = 0.0
    q_s: float = 0.0
    v_s: float = 1.0
    q_l: float = 0.0
    v_l: float = 1.0


@dataclass(frozen=True)
class ConverterParams:
    id: int
    bus_s: int
    bus_l: int
    r1: float = 0.0
    x1: float = 0.1
    r2: float = 0.0
    x2: float = 0.1
    a0: float = 0.0
    a1: float = 0.0
    a2_rect: float = 0.0
    a2_inv: float = 0.0
    v_dc: float = 2.0          # kV
    dc_base_kv_s: float = 1.0  # valve-side ac base voltage, side s
    dc_base_kv_l: float = 1.0  # valve-side ac base voltage, side l
    k_m: float = 0.61
    i_c_max: float = 2.0       # pu on system base
    s_rated: float = 250.0     # MVA
    k_q: float = 0.5
    is_lf_slack: bool = False
    rectifier_side: str = SIDE_S
    base_mva: float = 100.0
    z_filter: complex | None = None
    name: str = ""
    mode: ConverterMode = field(default_factory=ConverterMode)

    def check(self) -> list[str]:
        out = []
        if self.r1 < 0 or self.r2 < 0:
            out.append("negative series resistance")
        if self.i_c_max <= 0:
            out.append("i_c_max must be positive")
        if not (0 < self.k_m <= 1):
            out.append("k_m must lie in (0, 1]")
        if self.rectifier_side not in (SIDE_S, SIDE_L):
            out.append(f"rectifier_side must be 's' or 'l', got {self.rectifier_side!r}")
        if self.mode.side1 not in ("PQ", "PV"):
            out.append(f"unknown VSC1 mode {self.mode.side1!r}")
        if self.mode.side2 not in ("QVdc", "VVdc"):
            out.append(f"unknown VSC2 mode {self.mode.side2!r}")
        if self.is_lf_slack and self.mode.side2 != "VVdc":
            out.append("slack converter must run VSC2 in VVdc mode")
        return out

    def a2(self, side: str) -> float:
        return self.a2_rect if side == self.rectifier_side else self.a2_inv

    def resistance(self, side: str) -> float:
        return self.r1 if side == SIDE_S else self.r2

    def impedance(self, side: str) -> complex:
        return complex(self.r1, self.x1) if side == SIDE_S else complex(self.r2, self.x2)

    def v_dc_pu(self, side: str) -> float:
        base = self.dc_base_kv_s if side == SIDE_S else self.dc_base_kv_l
        return self.v_dc / base

    def k_v(self, side: str) -> float:
        """Modulation radius coefficient k_m * V_dc / |Z| for one side."""
        z = abs(self.impedance(side))
        if z == 0:
            raise ValueError(f"converter {self.id}: zero series impedance on side {side}")
        return self.k_m * self.v_dc_pu(side) / z


@dataclass(frozen=True)
class ConverterOperatingPoint:
    p_s: float
    q_s: float
    p_l: float
    q_l: float
    e_s: float = 1.0
    f_s: float = 0.0
    e_l: float = 1.0
    f_l: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.e_s, self.f_s, self.e_l, self.f_l,
                         self.p_s, self.q_s, self.p_l, self.q_l], dtype=float)

    @classmethod
    def from_vector(cls, z) -> "ConverterOperatingPoint":
        e_s, f_s, e_l, f_l, p_s, q_s, p_l, q_l = (float(v) for v in z)
        return cls(p_s, q_s, p_l, q_l, e_s, f_s, e_l, f_l)


@dataclass(frozen=True)
class LossBreakdown:
    p_joule_1: float
    p_sw_1: float
    p_joule_2: float
    p_sw_2: float

    @property
    def total(self) -> float:
        return self.p_joule_1 + self.p_sw_1 + self.p_joule_2 + self.p_sw_2


class SingularVoltageError(ValueError):
    pass


def _as_vec(pt) -> np.ndarray:
    if isinstance(pt, ConverterOperatingPoint):
        return pt.as_vector()
    return np.asarray(pt, dtype=float)


def _side_magnitudes(z, side):
    e, f, p, q = (z[i] for i in _SIDE_IDX[side])
    w = e * e + f * f
    if w <= 0:
        raise SingularVoltageError(f"zero terminal voltage on side {side}")
    return w, p * p + q * q


def converter_losses(pt, cp: ConverterParams) -> LossBreakdown:
    z = _as_vec(pt)
    out = []
    for side in (SIDE_S, SIDE_L):
        w, u = _side_magnitudes(z, side)
        i2 = u / w
        out.append(i2 * cp.resistance(side))
        out.append(cp.a0 + cp.a1 * math.sqrt(i2) + cp.a2(side) * i2)
    return LossBreakdown(*out)


def balance_residual(pt, cp: ConverterParams) -> float:
    """Active-power balance across the converter (zero when consistent)."""
    z = _as_vec(pt)
    val = z[6] - z[4] + 2.0 * cp.a0
    for side in (SIDE_S, SIDE_L):
        w, u = _side_magnitudes(z, side)
        val += u / w * (cp.resistance(side) + cp.a2(side)) + cp.a1 * math.sqrt(u / w)
    return float(val)


def _side_term_derivatives(e, f, p, q, c, a1, eps=S_EPS):
    """Gradient and Hessian of c*U/W + a1*sqrt(U)/sqrt(W) over (e, f, p, q).

    U = p^2 + q^2 (regularized by eps^2 inside the square root), W = e^2 + f^2.
    Derived by hand and checked against finite differences; the printed
    closed forms this replaces carry wrong powers of |S| in several entries.
    """
    w = e * e + f * f
    if w <= 0:
        raise SingularVoltageError("zero terminal voltage")
    u = p * p + q * q
    r = math.sqrt(u + eps * eps)
    v = math.sqrt(w)
    w2, w3 = w * w, w * w * w
    v3, v5 = v * w, v * w2
    r3 = r * (u + eps * eps)

    grad = np.array([
        -2.0 * c * u * e / w2 - a1 * r * e / v3,
        -2.0 * c * u * f / w2 - a1 * r * f / v3,
        2.0 * c * p / w + a1 * p / (r * v),
        2.0 * c * q / w + a1 * q / (r * v),
    ])
    H = np.empty((4, 4))
    H[0, 0] = c * u * (8.0 * e * e / w3 - 2.0 / w2) + a1 * r * (3.0 * e * e / v5 - 1.0 / v3)
    H[1, 1] = c * u * (8.0 * f * f / w3 - 2.0 / w2) + a1 * r * (3.0 * f * f / v5 - 1.0 / v3)
    H[0, 1] = H[1, 0] = 8.0 * c * u * e * f / w3 + 3.0 * a1 * r * e * f / v5
    H[0, 2] = H[2, 0] = -4.0 * c * p * e / w2 - a1 * p * e / (r * v3)
    H[0, 3] = H[3, 0] = -4.0 * c * q * e / w2 - a1 * q * e / (r * v3)
    H[1, 2] = H[2, 1] = -4.0 * c * p * f / w2 - a1 * p * f / (r * v3)
    H[1, 3] = H[3, 1] = -4.0 * c * q * f / w2 - a1 * q * f / (r * v3)
    H[2, 2] = 2.0 * c / w + a1 * (q * q + eps * eps) / (r3 * v)
    H[3, 3] = 2.0 * c / w + a1 * (p * p + eps * eps) / (r3 * v)
    H[2, 3] = H[3, 2] = -a1 * p * q / (r3 * v)
    return grad, H


def balance_jacobian(pt, cp: ConverterParams) -> np.ndarray:
    z = _as_vec(pt)
    grad = np.zeros(8)
    grad[4] -= 1.0
    grad[6] += 1.0
    for side in (SIDE_S, SIDE_L):
        idx = _SIDE_IDX[side]
        g, _ = _side_term_derivatives(*z[list(idx)], cp.resistance(side) + cp.a2(side), cp.a1)
        grad[list(idx)] += g
    return grad


def balance_hessian(pt, cp: ConverterParams) -> np.ndarray:
    z = _as_vec(pt)
    H = np.zeros((8, 8))
    for side in (SIDE_S, SIDE_L):
        idx = list(_SIDE_IDX[side])
        _, h = _side_term_derivatives(*z[idx], cp.resistance(side) + cp.a2(side), cp.a1)
        H[np.ix_(idx, idx)] += h
    return H


def current_limit(pt, cp: ConverterParams, side: str) -> float:
    """p^2 + q^2 - Imax^2 (e^2 + f^2); feasible when <= 0."""
    e, f, p, q = _as_vec(pt)[list(_SIDE_IDX[side])]
    return float(p * p + q * q - cp.i_c_max ** 2 * (e * e + f * f))


def current_limit_gradient(pt, cp: ConverterParams, side: str) -> np.ndarray:
    z = _as_vec(pt)
    e, f, p, q = z[list(_SIDE_IDX[side])]
    grad = np.zeros(8)
    i2 = cp.i_c_max ** 2
    grad[list(_SIDE_IDX[side])] = (-2.0 * i2 * e, -2.0 * i2 * f, 2.0 * p, 2.0 * q)
    return grad


def _admittance(cp: ConverterParams, side: str) -> tuple[float, float]:
    z = cp.impedance(side)
    if z == 0:
        raise ValueError(f"converter {cp.id}: zero series impedance on side {side}")
    y = 1.0 / z
    return y.real, y.imag


def _modulation_parts(z, cp, side):
    e, f, p, q = z[list(_SIDE_IDX[side])]
    g, b = _admittance(cp, side)
    sg = 1.0 if side == SIDE_S else -1.0
    w = e * e + f * f
    a = p - sg * w * g
    bq = q + sg * w * b
    return e, f, p, q, g, b, sg, w, a, bq, cp.k_v(side) ** 2


def modulation_limit(pt, cp: ConverterParams, side: str) -> float:
    """Converter ac voltage against the dc-link ceiling; feasible when <= 0.

    Side s uses [p - W g]^2 + [q + W b]^2 and side l the mirrored signs, with
    g + jb = 1/Z the inverse series impedance and W = e^2 + f^2.
    """
    *_, w, a, bq, kv2 = _modulation_parts(_as_vec(pt), cp, side)
    return float(a * a + bq * bq - kv2 * w)


def modulation_limit_gradient(pt, cp: ConverterParams, side: str) -> np.ndarray:
    e, f, p, q, g, b, sg, w, a, bq, kv2 = _modulation_parts(_as_vec(pt), cp, side)
    core = 4.0 * sg * (-g * a + b * bq) - 2.0 * kv2
    grad = np.zeros(8)
    grad[list(_SIDE_IDX[side])] = (core * e, core * f, 2.0 * a, 2.0 * bq)
    return grad


def capability_hessians(pt, cp: ConverterParams, side: str, which: str) -> np.ndarray:
    """8x8 Hessian of the current or modulation limit on one side."""
    idx = list(_SIDE_IDX[side])
    h = np.zeros((4, 4))
    if which == "current":
        i2 = cp.i_c_max ** 2
        h[0, 0] = h[1, 1] = -2.0 * i2
        h[2, 2] = h[3, 3] = 2.0
    elif which == "modulation":
        e, f, p, q, g, b, sg, w, a, bq, kv2 = _modulation_parts(_as_vec(pt), cp, side)
        y2 = g * g + b * b
        base = 4.0 * sg * (-g * a + b * bq) - 2.0 * kv2
        h[0, 0] = base + 8.0 * y2 * e * e
        h[1, 1] = base + 8.0 * y2 * f * f
        h[0, 1] = h[1, 0] = 8.0 * y2 * e * f
        h[2, 2] = h[3, 3] = 2.0
        # p-row: d/de of 2A; q-row: d/de of 2Bq (the latter is 4 sg b e, not -4 g f)
        h[0, 2] = h[2, 0] = -4.0 * sg * g * e
        h[1, 2] = h[2, 1] = -4.0 * sg * g * f
        h[0, 3] = h[3, 0] = 4.0 * sg * b * e
        h[1, 3] = h[3, 1] = 4.0 * sg * b * f
    else:
        raise ValueError(f"unknown capability constraint {which!r}")
    H = np.zeros((8, 8))
    H[np.ix_(idx, idx)] = h
    return H


def reactive_bounds(cp: ConverterParams) -> tuple[float, float]:
    """(max q_s, min q_l) in per-unit from k_Q * S_rated."""
    lim = cp.k_q * cp.s_rated / cp.base_mva
    return lim, -lim


@dataclass
class RegionPolyline:
    points: np.ndarray  # (n, 2) columns p, q; not closed
    empty: bool
    center: tuple[float, float] = (0.0, 0.0)


def _region_slacks(p, q, cp, side, w):
    z = np.zeros(8)
    idx = _SIDE_IDX[side]
    z[idx[0]] = math.sqrt(w)
    z[idx[2]], z[idx[3]] = p, q
    qs_max, ql_min = reactive_bounds(cp)
    kq = (qs_max - q) if side == SIDE_S else (q - ql_min)
    # scale the quadratic constraints by their radii so slacks compare in pu power
    ri = cp.i_c_max * math.sqrt(w)
    rm = cp.k_v(side) * math.sqrt(w)
    return min(-current_limit(z, cp, side) / max(ri, 1e-300),
               -modulation_limit(z, cp, side) / max(rm, 1e-300),
               kq)


def _ray_to_circle(p0, q0, dp, dq, cp_, cq_, r):
    # largest t >= 0 with |(p0,q0) + t d - c| <= r, starting inside
    ox, oy = p0 - cp_, q0 - cq_
    bb = ox * dp + oy * dq
    cc = ox * ox + oy * oy - r * r
    disc = bb * bb - cc
    return -bb + math.sqrt(max(disc, 0.0))


def feasible_region_polyline(cp: ConverterParams, v_terminal: float, n_points: int = 180,
                             side: str = SIDE_S) -> RegionPolyline:
    """Boundary of the (p, q) operating region at a fixed terminal voltage.

    The region is the intersection of the current disk, the modulation disk and
    the k_Q half-plane; it is convex, so the boundary is traced by casting rays
    from an interior point.
    """
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    w = v_terminal ** 2
    g, b = _admittance(cp, side)
    sg = 1.0 if side == SIDE_S else -1.0
    r_cur = cp.i_c_max * v_terminal
    mod_c = (sg * w * g, -sg * w * b)
    r_mod = cp.k_v(side) * v_terminal
    qs_max, ql_min = reactive_bounds(cp)
    if r_cur <= 0 or r_mod <= 0:
        return RegionPolyline(np.zeros((0, 2)), True)

    # pick the most interior point of a coarse grid over the current disk
    best, best_s = None, 0.0
    grid = np.linspace(-r_cur, r_cur, 81)
    for p in grid:
        for q in grid:
            s = _region_slacks(p, q, cp, side, w)
            if s > best_s:
                best, best_s = (p, q), s
    if best is None:
        return RegionPolyline(np.zeros((0, 2)), True)

    p0, q0 = best
    pts = np.empty((n_points, 2))
    for i, th in enumerate(np.linspace(0.0, 2.0 * math.pi, n_points, endpoint=False)):
        dp, dq = math.cos(th), math.sin(th)
        t = min(_ray_to_circle(p0, q0, dp, dq, 0.0, 0.0, r_cur),
                _ray_to_circle(p0, q0, dp, dq, mod_c[0], mod_c[1], r_mod))
        if side == SIDE_S and dq > 0:
            t = min(t, (qs_max - q0) / dq)
        if side == SIDE_L and dq < 0:
            t = min(t, (ql_min - q0) / dq)
        pts[i] = (p0 + t * dp, q0 + t * dq)
    return RegionPolyline(pts, False, (p0, q0))
