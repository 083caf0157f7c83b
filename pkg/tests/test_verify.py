import copy
import json

import pytest

from conftest import desk_system

from mfopf.formulation import ObjectiveSpec
from mfopf.io import opf_to_dict, write_json
from mfopf.network import ShuntCapacitor
from mfopf.opf import run_opf
from mfopf.verify import VerificationError, verify_file, verify_solution


def solved(converter_dispatch=True, alpha2=0.0):
    s = desk_system(caps=(ShuntCapacitor(2, (0.0, 0.05, 0.1, 0.15), 0.05),
                          ShuntCapacitor(3, (0.0, 0.04, 0.08), 0.0)))
    res = run_opf(s, ObjectiveSpec(1.0, alpha2, q_sh_prev=(0.05, 0.0)), converter_dispatch=converter_dispatch)
    assert res.converged
    return json.loads(json.dumps(opf_to_dict(res)))


@pytest.fixture(scope="module")
def doc():
    return solved()


def test_solver_output_is_certified(doc):
    cert = verify_solution(doc)
    assert cert.passed(), cert.summary()
    assert cert.notes == [] and cert.capacitors_exact


def test_converter_figures(doc):
    cert = verify_solution(doc)
    assert abs(cert.converter_balance[1]) <= 1e-6
    assert cert.converter_losses[1] >= 2 * 0.011


def test_switching_penalty_run_is_certified():
    cert = verify_solution(solved(alpha2=0.2))
    assert cert.passed(), cert.summary()


def test_fixed_converter_run_is_certified():
    d = solved(converter_dispatch=False)
    cert = verify_solution(d)
    assert cert.passed() and cert.notes == []


def test_unpinned_schedule_is_noted():
    d = solved(converter_dispatch=False)
    for p in d["duals"]["pinned"]:
        if p["var"] == "qs:1":
            p["value"] += 0.01
    assert any("not pinned" in n for n in verify_solution(d).notes)


def test_moved_voltage_breaks_feasibility(doc):
    bad = copy.deepcopy(doc)
    bad["solution"]["buses"][1]["e"] += 1e-3
    assert verify_solution(bad).feasibility > 1e-4


def test_wrong_multiplier_breaks_stationarity(doc):
    bad = copy.deepcopy(doc)
    bad["duals"]["balance_p"]["2"] += 0.1
    cert = verify_solution(bad)
    assert cert.stationarity > 1e-2 and not cert.passed()


def test_negative_multiplier_is_flagged(doc):
    bad = copy.deepcopy(doc)
    key = next(iter(bad["duals"]["bounds"]))
    bad["duals"]["bounds"][key][0] = -0.5
    assert verify_solution(bad).dual_sign == pytest.approx(0.5)


def test_off_step_capacitor_is_flagged(doc):
    bad = copy.deepcopy(doc)
    bad["solution"]["capacitors"][0]["q"] += 1e-7
    cert = verify_solution(bad)
    assert not cert.capacitors_exact and not cert.passed()


def test_complementarity_uses_slack_times_multiplier(doc):
    bad = copy.deepcopy(doc)
    # a multiplier on a slack voltage limit makes the products large
    for v in bad["duals"]["voltage_limits"].values():
        v[1] += 1.0
    assert verify_solution(bad).gap > 1e-3


def test_structural_problems_raise(doc):
    with pytest.raises(VerificationError, match="not an OPF"):
        verify_solution({**doc, "kind": "horizon"})
    with pytest.raises(VerificationError, match="no multipliers"):
        verify_solution({**doc, "duals": {}})
    bad = copy.deepcopy(doc)
    del bad["duals"]["converter_balance"]["1"]
    with pytest.raises(VerificationError, match="converter_balance"):
        verify_solution(bad)


def test_verify_file(doc, tmp_path):
    write_json(doc, tmp_path / "s.json")
    assert verify_file(tmp_path / "s.json").passed()
