from pathlib import Path

import numpy as np
import pytest

from mfopf.converter import ConverterMode, ConverterParams
from mfopf.network import (LOAD, SLACK, VOLTAGE_CONTROLLED, Bus, Generator, Grid, Line,
                           MultiFrequencySystem, ShuntCapacitor)

CASES = Path(__file__).resolve().parent.parent / "src" / "mfopf" / "cases"
CASE57 = CASES / "case57_mf.json"
CASE_MIN = CASES / "case_minimal.json"

# switching-loss coefficients and converter ratings of the bundled cases
A0, A1, A2_RECT, A2_INV = 11.033e-3, 3.464e-3, 4.400e-3, 6.667e-3


def desk_converter(**kw) -> ConverterParams:
    base = dict(id=1, bus_s=2, bus_l=4, r1=0.0001, x1=0.08, r2=0.0001, x2=0.08, a0=0.011, a1=0.0035,
                a2_rect=0.0044, a2_inv=0.0067, v_dc=70.0, dc_base_kv_s=33.0, dc_base_kv_l=33.0,
                i_c_max=3.0, s_rated=300.0, is_lf_slack=True, mode=ConverterMode("PQ", "VVdc", v_l=1.0))
    base.update(kw)
    return ConverterParams(**base)


def desk_system(caps=None, load_scale=1.0) -> MultiFrequencySystem:
    """3-bus 50 Hz grid coupled to a 2-bus 10 Hz grid by one slack converter."""
    if caps is None:
        caps = (ShuntCapacitor(2, (0.0, 0.05, 0.1, 0.15), 0.0),)
    hf = Grid(1, 50.0, 138.0, (
        Bus(1, 1, SLACK, 1.02),
        Bus(2, 1, LOAD, None, p_load=0.6 * load_scale, q_load=0.2 * load_scale),
        Bus(3, 1, VOLTAGE_CONTROLLED, 1.01, p_load=0.3 * load_scale, q_load=0.1 * load_scale)),
        (Line.from_impedance(1, 2, 0.02, 0.08, 0.02), Line.from_impedance(2, 3, 0.03, 0.1, 0.02),
         Line.from_impedance(1, 3, 0.02, 0.09)),
        (Generator(1, 0, 3, -2, 2, 0.5), Generator(3, 0, 2, -1, 1, 0.3)),
        tuple(caps))
    lf = Grid(2, 10.0, 500.0, (Bus(4, 2, SLACK, 1.0), Bus(5, 2, VOLTAGE_CONTROLLED, 1.0)),
              (Line.from_impedance(4, 5, 0.004, 0.007, 0.1),),
              (Generator(5, 0, 0.5, -0.5, 0.5, 0.3),))
    return MultiFrequencySystem((hf, lf), (desk_converter(),), name="desk")


def random_desk(rng, n_caps: int) -> MultiFrequencySystem:
    """Desk system with ``n_caps`` banks at buses 2/3, random step sets and loads."""
    caps = []
    for _ in range(n_caps):
        n_steps = int(rng.integers(2, 5))
        size = rng.uniform(0.02, 0.08)
        steps = tuple(float(round(size * k, 6)) for k in range(n_steps))
        caps.append(ShuntCapacitor(int(rng.choice([2, 3])), steps, float(rng.choice(steps))))
    return desk_system(caps, load_scale=float(rng.uniform(0.7, 1.3)))


def random_point(problem, rng) -> np.ndarray:
    """A random operating point away from zero converter current."""
    L = problem.layout
    x = np.zeros(problem.n)
    x[L.e_idx] = rng.uniform(0.9, 1.1, L.nb)
    x[L.f_idx] = rng.uniform(-0.2, 0.2, L.nb)
    x[L.pg_idx] = rng.uniform(0.0, 1.0, len(L.pg_idx))
    x[L.qg_idx] = rng.uniform(-0.5, 0.5, len(L.qg_idx))
    x[L.qsh_idx] = rng.uniform(0.0, 0.15, len(L.qsh_idx))
    for idx in (L.ps_idx, L.qs_idx, L.pl_idx, L.ql_idx):
        x[idx] = rng.choice([-1, 1], len(idx)) * rng.uniform(0.1, 0.8, len(idx))
    return x


def fd_jacobian(fn, x, h=1e-6):
    cols = []
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.column_stack(cols)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b), initial=0.0) / max(1.0, np.max(np.abs(b), initial=0.0)))


@pytest.fixture
def desk():
    return desk_system()


@pytest.fixture(scope="session")
def case57():
    from mfopf.io import parse_case
    return parse_case(CASE57)


# acceptance-criterion outcomes, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n}] {'PASS' if ok else 'FAIL'}  {detail}")
