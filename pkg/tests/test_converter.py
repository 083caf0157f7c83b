import dataclasses
import math

import numpy as np
import pytest

from conftest import A0, A1, A2_INV, A2_RECT, desk_converter, fd_jacobian, rel_err

from mfopf import converter as cv
from mfopf.converter import SIDE_L, SIDE_S, ConverterOperatingPoint, SingularVoltageError


def table_converter(**kw):
    base = dict(a0=A0, a1=A1, a2_rect=A2_RECT, a2_inv=A2_INV, rectifier_side=SIDE_S)
    base.update(kw)
    return desk_converter(**base)


def lossless(**kw):
    return desk_converter(r1=0.0, r2=0.0, a0=0.0, a1=0.0, a2_rect=0.0, a2_inv=0.0, **kw)


def point(rng):
    z = np.empty(8)
    z[:4] = rng.uniform(0.9, 1.1, 4) * np.array([1, 0.1, 1, 0.1]) + np.array([0, 0, 0, 0])
    z[4:] = rng.choice([-1, 1], 4) * rng.uniform(0.05, 1.5, 4)
    return z


def region_converter(**kw):
    base = dict(r1=0.0001, x1=0.15, k_m=0.61, i_c_max=2.0, s_rated=250.0, k_q=0.5)
    base.update(kw)
    return desk_converter(**base)


# losses ----------------------------------------------------------------------

def test_idle_converter_loses_a0_per_side():
    cp = table_converter()
    lb = cv.converter_losses([1, 0, 1, 0, 0, 0, 0, 0], cp)
    assert lb.p_sw_1 == pytest.approx(11.033e-3, abs=1e-15)
    assert lb.p_sw_2 == pytest.approx(11.033e-3, abs=1e-15)
    assert lb.p_joule_1 == 0.0 and lb.p_joule_2 == 0.0


def test_unit_flow_on_rectifier_side():
    cp = table_converter(r1=0.0001)
    lb = cv.converter_losses([1, 0, 1, 0, 1.0, 0, 0, 0], cp)
    assert lb.p_joule_1 == pytest.approx(0.0001, rel=1e-12)
    assert lb.p_sw_1 == pytest.approx(18.897e-3, rel=1e-12)


def test_zero_coefficients_no_losses():
    lb = cv.converter_losses([1, 0, 1, 0, 0.7, 0.2, 0.6, -0.1], lossless())
    assert lb.total == 0.0


def test_zero_voltage_is_singular():
    with pytest.raises(SingularVoltageError):
        cv.converter_losses([0, 0, 1, 0, 0.1, 0, 0.1, 0], table_converter())
    with pytest.raises(SingularVoltageError):
        cv.balance_residual([1, 0, 0, 0, 0.1, 0, 0.1, 0], table_converter())


# balance ---------------------------------------------------------------------

def test_lossless_balance():
    cp = lossless()
    assert cv.balance_residual([1, 0, 1, 0, 0.5, 0, 0.5, 0], cp) == 0.0
    assert cv.balance_residual([1, 0, 1, 0, 0.6, 0, 0.5, 0], cp) == pytest.approx(-0.1, abs=1e-15)


def test_balance_matches_phasor_chain():
    # currents from complex phasors, losses from |I| per side, then p_l + losses - p_s
    cp = table_converter(r1=0.0001, r2=0.0001)
    vs, vl = 1.0 + 0.0j, 1.0 + 0.0j
    ss, sl = complex(0.55, 0.1), complex(0.5, 0.0)
    i_s, i_l = abs(np.conj(ss / vs)), abs(np.conj(sl / vl))
    loss = (i_s ** 2 * cp.r1 + A0 + A1 * i_s + A2_RECT * i_s ** 2
            + i_l ** 2 * cp.r2 + A0 + A1 * i_l + A2_INV * i_l ** 2)
    ref = sl.real + loss - ss.real
    got = cv.balance_residual([vs.real, vs.imag, vl.real, vl.imag, ss.real, ss.imag, sl.real, sl.imag], cp)
    assert got == pytest.approx(ref, abs=1e-12)


def test_operating_point_vector_order():
    pt = ConverterOperatingPoint(p_s=1, q_s=2, p_l=3, q_l=4, e_s=5, f_s=6, e_l=7, f_l=8)
    assert list(pt.as_vector()) == [5, 6, 7, 8, 1, 2, 3, 4]
    assert ConverterOperatingPoint.from_vector(pt.as_vector()) == pt
    assert cv.balance_residual(pt, table_converter()) == cv.balance_residual(pt.as_vector(), table_converter())


def test_lossless_gradient():
    g = cv.balance_jacobian([1.0, 0.1, 0.98, 0.0, 0.3, 0.2, 0.3, -0.1], lossless())
    assert np.allclose(g, [0, 0, 0, 0, -1, 0, 1, 0], atol=0)


@pytest.mark.parametrize("seed", range(10))
def test_balance_derivatives_match_fd(seed):
    rng = np.random.default_rng(seed)
    cp = table_converter(r1=0.001, r2=0.002)
    z = point(rng)
    assert rel_err(cv.balance_jacobian(z, cp), fd_jacobian(lambda v: [cv.balance_residual(v, cp)], z)[0]) <= 1e-6
    assert rel_err(cv.balance_hessian(z, cp), fd_jacobian(lambda v: cv.balance_jacobian(v, cp), z)) <= 1e-5


def test_side_swap_symmetry():
    rng = np.random.default_rng(4)
    cp = table_converter(r1=0.001, r2=0.003, x1=0.08, x2=0.12)
    sw = dataclasses.replace(cp, r1=cp.r2, r2=cp.r1, x1=cp.x2, x2=cp.x1, rectifier_side=SIDE_L)
    z = point(rng)
    zs = np.array([z[2], z[3], z[0], z[1], -z[6], z[7], -z[4], z[5]])
    g, gs = cv.balance_jacobian(z, cp), cv.balance_jacobian(zs, sw)
    assert cv.balance_residual(zs, sw) == pytest.approx(cv.balance_residual(z, cp), abs=1e-14)
    assert np.allclose(gs, [g[2], g[3], g[0], g[1], -g[6], g[7], -g[4], g[5]], atol=1e-13)


def test_quadratic_only_hessian():
    cp = desk_converter(a0=0.0, a1=0.0, a2_rect=0.004, a2_inv=0.006, r1=0.001, r2=0.002, rectifier_side=SIDE_S)
    H = cv.balance_hessian([1, 0, 1, 0, 0.4, 0.1, 0.3, 0.2], cp)
    assert H[4, 4] == pytest.approx(2 * (0.001 + 0.004), rel=1e-14)
    assert H[6, 6] == pytest.approx(2 * (0.002 + 0.006), rel=1e-14)


def test_zero_loss_hessian_and_symmetry():
    assert not cv.balance_hessian([1, 0.1, 1, 0, 0.4, 0.1, 0.3, 0.2], lossless()).any()
    H = cv.balance_hessian(point(np.random.default_rng(1)), table_converter(r1=0.01))
    assert np.array_equal(H, H.T)


# capability ------------------------------------------------------------------

def test_current_limit_values():
    cp = desk_converter(i_c_max=2.0)
    assert cv.current_limit([1, 0, 1, 0, 0, 0, 0, 0], cp, SIDE_S) == -4.0
    assert cv.current_limit([1, 0, 1, 0, 1.2, 1.6, 0, 0], cp, SIDE_S) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_current_limit_sign_matches_magnitudes(seed):
    rng = np.random.default_rng(seed)
    cp = desk_converter(i_c_max=1.0)
    for _ in range(50):
        z = point(rng)
        for side, (e, f, p, q) in ((SIDE_S, z[[0, 1, 4, 5]]), (SIDE_L, z[[2, 3, 6, 7]])):
            direct = math.hypot(p, q) <= cp.i_c_max * math.hypot(e, f)
            assert (cv.current_limit(z, cp, side) <= 0) == direct


def test_current_hessian_constant():
    cp = desk_converter()
    rng = np.random.default_rng(0)
    a = cv.capability_hessians(point(rng), cp, SIDE_L, "current")
    b = cv.capability_hessians(point(rng), cp, SIDE_L, "current")
    assert np.array_equal(a, b)
    assert a[2, 2] == -2 * cp.i_c_max ** 2 and a[6, 6] == 2.0


def test_modulation_lossless_impedance_collapse():
    cp = desk_converter(r1=0.0, x1=0.1)
    b1 = (1 / complex(0.0, 0.1)).imag
    h = cv.modulation_limit([1, 0, 1, 0, 0, 0, 0, 0], cp, SIDE_S)
    assert h == pytest.approx(b1 ** 2 - cp.k_v(SIDE_S) ** 2, rel=1e-14)


def test_modulation_voltage_scaling():
    cp = desk_converter()
    z = np.array([0.9, 0.1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    t = 1.07
    zt = z.copy()
    zt[:2] *= t
    kv2 = cp.k_v(SIDE_S) ** 2
    # with p = q = 0 the non-k_V part is |y|^2 W^2, so strip it to isolate the k_V term
    y2 = abs(1 / cp.impedance(SIDE_S)) ** 2
    part = cv.modulation_limit(z, cp, SIDE_S) - y2 * 0.82 ** 2
    part_t = cv.modulation_limit(zt, cp, SIDE_S) - y2 * (0.82 * t * t) ** 2
    assert part == pytest.approx(-kv2 * 0.82, rel=1e-12)
    assert part_t == pytest.approx(t * t * part, rel=1e-12)


@pytest.mark.parametrize("side", [SIDE_S, SIDE_L])
def test_capability_derivatives_match_fd(side):
    rng = np.random.default_rng(11)
    cp = table_converter(r1=0.002, r2=0.001)
    for _ in range(10):
        z = point(rng)
        assert rel_err(cv.modulation_limit_gradient(z, cp, side),
                       fd_jacobian(lambda v: [cv.modulation_limit(v, cp, side)], z)[0]) <= 1e-6
        assert rel_err(cv.current_limit_gradient(z, cp, side),
                       fd_jacobian(lambda v: [cv.current_limit(v, cp, side)], z)[0]) <= 1e-6
        H = cv.capability_hessians(z, cp, side, "modulation")
        assert np.array_equal(H, H.T)
        assert rel_err(H, fd_jacobian(lambda v: cv.modulation_limit_gradient(v, cp, side), z)) <= 1e-5


def test_degenerate_impedance_rejected():
    cp = desk_converter(r1=0.0, x1=0.0)
    with pytest.raises(ValueError):
        cv.capability_hessians([1, 0, 1, 0, 0, 0, 0, 0], cp, SIDE_S, "modulation")
    with pytest.raises(ValueError):
        cv.capability_hessians([1, 0, 1, 0, 0, 0, 0, 0], desk_converter(), SIDE_S, "thermal")


def test_origin_strictly_feasible_with_table_parameters(case57):
    for cp in case57.system.converters:
        z = [1.0, 0, 1.0, 0, 0, 0, 0, 0]
        for side in (SIDE_S, SIDE_L):
            assert cv.current_limit(z, cp, side) < 0
            assert cv.modulation_limit(z, cp, side) < 0


def test_reactive_bounds():
    assert cv.reactive_bounds(desk_converter(s_rated=300.0, k_q=0.5)) == (1.5, -1.5)
    assert cv.reactive_bounds(desk_converter(k_q=0.0)) == (0.0, 0.0)
    assert cv.reactive_bounds(desk_converter(s_rated=250.0, k_q=0.5))[0] == pytest.approx(1.25)


# operating region ------------------------------------------------------------

def region_slack(cp, p, q, v, side=SIDE_S):
    z = np.zeros(8)
    z[0 if side == SIDE_S else 2] = v
    z[4 if side == SIDE_S else 6], z[5 if side == SIDE_S else 7] = p, q
    qmax, qmin = cv.reactive_bounds(cp)
    return (cv.current_limit(z, cp, side), cv.modulation_limit(z, cp, side),
            q - qmax if side == SIDE_S else qmin - q)


def test_region_points_feasible_and_on_boundary():
    cp = region_converter()
    reg = cv.feasible_region_polyline(cp, 1.0, 120)
    assert not reg.empty and len(reg.points) == 120
    y = 1 / complex(cp.r1, cp.x1)
    g, b = y.real, y.imag
    r_cur, r_mod = cp.i_c_max, cp.k_v(SIDE_S)
    for p, q in reg.points:
        h_i, h_m, h_q = region_slack(cp, p, q, 1.0)
        assert max(h_i, h_m, h_q) <= 1e-9
        on_cur = abs(math.hypot(p, q) - r_cur)
        on_mod = abs(math.hypot(p - g, q + b) - r_mod)
        on_q = abs(q - cv.reactive_bounds(cp)[0])
        assert min(on_cur, on_mod, on_q) <= 1e-9


def test_region_lf_side():
    cp = region_converter(r2=0.0001, x2=0.15)
    reg = cv.feasible_region_polyline(cp, 1.0, 60, side=SIDE_L)
    assert min(reg.points[:, 1]) == pytest.approx(cv.reactive_bounds(cp)[1], abs=1e-9)
    for p, q in reg.points:
        assert max(region_slack(cp, p, q, 1.0, SIDE_L)) <= 1e-9


def test_region_empty_without_current():
    reg = cv.feasible_region_polyline(region_converter(i_c_max=0.0), 1.0, 16)
    assert reg.empty and len(reg.points) == 0


def test_region_large_limits_top_is_kq_line():
    cp = region_converter(i_c_max=50.0, v_dc=5000.0)
    reg = cv.feasible_region_polyline(cp, 1.0, 90)
    top = reg.points[:, 1].max()
    assert top == pytest.approx(cv.reactive_bounds(cp)[0], abs=1e-12)
    assert sum(abs(q - top) <= 1e-12 for q in reg.points[:, 1]) > 1


def test_region_needs_enough_points():
    with pytest.raises(ValueError):
        cv.feasible_region_polyline(region_converter(), 1.0, 4)


def test_check_reports_bad_params():
    msgs = desk_converter(r1=-1, i_c_max=0, k_m=1.5).check()
    assert len(msgs) == 3
    assert "slack converter must run VSC2 in VVdc mode" in desk_converter(
        mode=cv.ConverterMode("PQ", "QVdc")).check()
