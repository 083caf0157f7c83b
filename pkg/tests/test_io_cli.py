import copy
import csv
import json

import numpy as np
import pytest

from conftest import CASE57, CASE_MIN, desk_converter

from mfopf import cli
from mfopf.horizon import HorizonResult, LoadProfile, run_horizon
from mfopf.io import (CSV_COLUMNS, CaseError, case_from_dict, case_to_dict, emit_plot_data, emit_region,
                      horizon_to_dict, parse_case, read_results, write_case, write_results)


def region_params(**kw):
    return dict(dict(r1=0.0001, x1=0.15, k_m=0.61, i_c_max=2.0, s_rated=250.0, k_q=0.5), **kw)


def minimal_doc():
    return json.loads(CASE_MIN.read_text())


def write_doc(tmp_path, doc, name="case.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def short_run():
    case = parse_case(CASE_MIN)
    return run_horizon(case.system, LoadProfile((1.0, 0.8)), "opf")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# parsing ---------------------------------------------------------------------

def test_case57_shape(case57):
    s = case57.system
    assert sum(len(g.buses) for g in s.grids) == 65
    assert len(s.converters) == 5
    assert sorted(c.bus_s for c in s.converters) == [8, 12, 16, 17, 52]
    caps = {c.bus: max(c.steps) * s.base_mva for g in s.grids for c in g.capacitors}
    assert caps == pytest.approx({18: 10.01, 25: 9.0, 31: 10.0, 53: 11.88}, abs=1e-9)
    assert len(case57.profile) == 24


def test_minimal_case_parses():
    case = parse_case(CASE_MIN)
    assert [len(g.buses) for g in case.system.grids] == [3, 2]
    # 60 MW on a 100 MVA base
    assert case.system.grids[0].buses[1].p_load == pytest.approx(0.6, rel=1e-15)


def test_converter_to_missing_bus_names_field():
    doc = minimal_doc()
    doc["converters"][0]["bus_l"] = 99
    with pytest.raises(CaseError, match=r"converters/0/bus_l"):
        case_from_dict(doc)


def test_line_to_foreign_bus_names_field():
    doc = minimal_doc()
    doc["grids"][0]["lines"][0]["to"] = 4
    with pytest.raises(CaseError, match=r"grids/0/lines/0/to"):
        case_from_dict(doc)


def test_schema_violation_names_field():
    doc = minimal_doc()
    doc["grids"][0]["buses"][1]["kind"] = "pq"
    with pytest.raises(CaseError, match=r"grids/0/buses/1/kind"):
        case_from_dict(doc)


def test_unsupported_schema_version():
    doc = minimal_doc()
    doc["schema_version"] = "2.0"
    with pytest.raises(CaseError, match="schema_version"):
        case_from_dict(doc)


def test_validation_failure_is_fatal():
    doc = minimal_doc()
    doc["grids"][1]["buses"][1]["p_load_mw"] = 5.0
    with pytest.raises(CaseError, match="load on LF grid bus"):
        case_from_dict(doc)


def test_ohm_lines_converted_to_per_unit():
    doc = minimal_doc()
    ln = doc["grids"][0]["lines"][0]
    zb = 138.0 ** 2 / 100.0
    for k in ("r_pu", "x_pu", "b_pu"):
        ln.pop(k)
    ln.update(r_ohm=0.02 * zb, x_ohm=0.08 * zb, b_us=0.02 / zb * 1e6)
    a = case_from_dict(doc).system.grids[0].lines[0]
    b = parse_case(CASE_MIN).system.grids[0].lines[0]
    assert a.g == pytest.approx(b.g, rel=1e-12) and a.b == pytest.approx(b.b, rel=1e-12)
    assert a.b_shunt_half == pytest.approx(b.b_shunt_half, rel=1e-12)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(OSError, match="nope.json"):
        parse_case(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(CaseError, match="not valid JSON"):
        parse_case(bad)


@pytest.mark.parametrize("path", [CASE_MIN, CASE57])
def test_parse_write_parse_fixed_point(path, tmp_path):
    first = parse_case(path)
    write_case(first, tmp_path / "a.json")
    second = parse_case(tmp_path / "a.json")
    assert second.system == first.system
    assert case_to_dict(second) == case_to_dict(first)
    write_case(second, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_unknown_options_are_kept():
    doc = minimal_doc()
    doc["options"] = {"alpha2": 0.2, "note": "kept"}
    case = case_from_dict(doc)
    assert case.options.alpha2 == 0.2 and case.options.extra == {"note": "kept"}
    assert case_to_dict(case)["options"]["note"] == "kept"


# results ---------------------------------------------------------------------

def test_json_round_trip(short_run, tmp_path):
    write_results(short_run, tmp_path / "r.json", config={"seed": 1})
    back = read_results(tmp_path / "r.json")
    assert back == json.loads(json.dumps(horizon_to_dict(short_run, {"seed": 1})))
    assert back["steps"][1]["q_sh_prev"] == back["steps"][0]["q_sh"]


def test_results_are_bit_stable(short_run, tmp_path):
    for name in ("a", "b"):
        write_results(short_run, tmp_path / f"{name}.json")
        write_results(short_run, tmp_path / f"{name}.csv")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_csv_rows(short_run, tmp_path):
    write_results(short_run, tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 3
    assert float(rows[1][CSV_COLUMNS.index("losses_mw")]) == short_run.steps[0].losses_mw


def test_empty_horizon_gives_header_only_csv(tmp_path):
    write_results(HorizonResult("pf", (1.0, 0.0), [], [], 100.0), tmp_path / "e.csv")
    assert read_csv(tmp_path / "e.csv") == [list(CSV_COLUMNS)]


def test_unknown_format_rejected(short_run, tmp_path):
    with pytest.raises(ValueError):
        write_results(short_run, tmp_path / "r.txt", fmt="xml")


def test_unwritable_path_is_reported(short_run, tmp_path):
    with pytest.raises(OSError, match="missing"):
        write_results(short_run, tmp_path / "missing" / "r.csv")


def test_converter_block_shape(short_run):
    c = short_run.steps[0].converters[0]
    assert {"p_s", "q_s", "v_s", "p_l", "q_l", "v_l"} <= set(c)


def test_plot_data_series(short_run, tmp_path):
    one = run_horizon(parse_case(CASE_MIN).system, LoadProfile((1.0,)), "pf")
    emit_plot_data({"pf": one, "opf": short_run, "opf_b": short_run}, tmp_path)
    losses = read_csv(tmp_path / "losses.csv")
    assert losses[0] == ["step", "pf", "opf", "opf_b"]
    assert len(losses) == 3 and losses[2][1] == ""
    caps = read_csv(tmp_path / "capacitors_pf.csv")
    assert caps[0] == ["step", "bus_2_mvar"] and len(caps) == 2


def test_region_polyline_is_closed(tmp_path):
    reg = emit_region(desk_converter(**region_params()), 1.0, "s", tmp_path / "r.csv", operating_point=(0.5, 0.1))
    rows = read_csv(tmp_path / "r.csv")
    body = [r for r in rows[1:] if r[0] == "boundary"]
    assert not reg.empty and body[0] == body[-1] and len(body) == len(reg.points) + 1
    assert rows[-1] == ["operating_point", "50.0", "10.0"]


def test_empty_region_has_no_boundary(tmp_path):
    emit_region(desk_converter(**region_params(i_c_max=0.0)), 1.0, "s", tmp_path / "r.csv")
    assert read_csv(tmp_path / "r.csv") == [["kind", "p_mw", "q_mvar"]]


# command line ----------------------------------------------------------------

def test_cli_validate(capsys):
    assert cli.main(["validate", "--case", str(CASE_MIN)]) == cli.EXIT_OK
    assert "5 buses, 1 converters" in capsys.readouterr().out


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["opf"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["opf", "--case", str(CASE_MIN), "--starts", "cold"])
    assert exc.value.code == cli.EXIT_USAGE


def test_cli_invalid_case(tmp_path, capsys):
    doc = minimal_doc()
    doc["converters"][0]["bus_s"] = 42
    assert cli.main(["validate", "--case", str(write_doc(tmp_path, doc))]) == cli.EXIT_INVALID
    assert "converters/0/bus_s" in capsys.readouterr().err


def test_cli_missing_file(tmp_path):
    assert cli.main(["pf", "--case", str(tmp_path / "none.json")]) == cli.EXIT_IO


def test_cli_nonconvergence(tmp_path):
    doc = minimal_doc()
    doc["options"] = {"max_iters": 1}
    assert cli.main(["opf", "--case", str(write_doc(tmp_path, doc))]) == cli.EXIT_NONCONVERGED


def test_cli_horizon_without_profile(tmp_path):
    doc = minimal_doc()
    doc.pop("profile")
    assert cli.main(["horizon", "--case", str(write_doc(tmp_path, doc)), "--mode", "pf"]) == cli.EXIT_INVALID


def test_cli_alpha2_zero_equals_default(tmp_path):
    outs = []
    for extra in ([], ["--alpha2", "0"]):
        out = tmp_path / f"o{len(extra)}.json"
        assert cli.main(["opf", "--case", str(CASE_MIN), "--out", str(out)] + extra) == cli.EXIT_OK
        doc = read_results(out)
        doc.pop("config")
        outs.append(doc)
    assert outs[0] == outs[1]


def test_cli_opf_verify_region(tmp_path, capsys):
    sol = tmp_path / "sol.json"
    assert cli.main(["opf", "--case", str(CASE_MIN), "--out", str(sol)]) == cli.EXIT_OK
    assert cli.main(["verify", "--solution", str(sol)]) == cli.EXIT_OK
    assert "capacitors_exact=True" in capsys.readouterr().out
    reg = tmp_path / "reg.csv"
    assert cli.main(["region", "--case", str(CASE_MIN), "--converter", "1", "--side", "l",
                     "--solution", str(sol), "--out", str(reg)]) == cli.EXIT_OK
    assert read_csv(reg)[-1][0] == "operating_point"
    assert cli.main(["region", "--case", str(CASE_MIN), "--converter", "7", "--side", "l",
                     "--out", str(reg)]) == cli.EXIT_INVALID


def test_cli_verify_rejects_tampered_solution(tmp_path):
    sol = tmp_path / "sol.json"
    cli.main(["opf", "--case", str(CASE_MIN), "--out", str(sol)])
    doc = read_results(sol)
    bad = copy.deepcopy(doc)
    bad["solution"]["buses"][1]["e"] += 1e-3
    p = write_doc(tmp_path, bad, "bad.json")
    assert cli.main(["verify", "--solution", str(p)]) == cli.EXIT_NONCONVERGED


def test_cli_horizon_and_pf_outputs(tmp_path):
    out, plots = tmp_path / "h.csv", tmp_path / "plots"
    assert cli.main(["horizon", "--case", str(CASE_MIN), "--mode", "opf", "--alpha2", "0.2",
                     "--out", str(out), "--plots", str(plots), "--label", "case3"]) == cli.EXIT_OK
    assert len(read_csv(out)) == len(parse_case(CASE_MIN).profile) + 1
    assert read_csv(plots / "losses.csv")[0] == ["step", "case3"]
    pf = tmp_path / "pf.json"
    assert cli.main(["pf", "--case", str(CASE_MIN), "--out", str(pf)]) == cli.EXIT_OK
    steps = read_results(pf)["steps"]
    assert len(steps) == 1 and np.isfinite(steps[0]["losses_mw"])
