"""Build the bundled 57+8-bus two-frequency case from public IEEE-57 data.

Changes to the 57-bus system:
  * generators at buses 8 and 12 removed; converters A and B connect there;
  * fixed bus shunts replaced by switchable capacitor banks at 18, 25, 31, 53;
  * loads scaled to a 1464.3 MW peak.

The 8-bus 10 Hz grid (buses 58-65, 500 kV) is a reconstruction: a radial tree
of 300 km overhead lines with the slack converter at bus 58, wind generators
on voltage-controlled buses 59-61 and converter terminals at 62-65.

Usage: python scripts/build_case57.py [out.json]
"""
import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
OUT = HERE.parent / "src" / "mfopf" / "cases" / "case57_mf.json"

PEAK_MW = 1464.3
CAP_RATINGS = {18: 10.01, 25: 9.0, 31: 10.0, 53: 11.88}
REMOVED_GENS = {8, 12}
# Case-1 set-points (slack at bus 1) and generator limits (P max MW, Q min, Q max Mvar)
HF_DISPATCH = {1: None, 2: 0.0, 3: 40.0, 6: 40.0, 9: 0.0}
HF_LIMITS = {1: (575.88, -140.0, 200.0), 2: (100.0, -150.0, 150.0), 3: (140.0, -150.0, 150.0),
             6: (100.0, -150.0, 150.0), 9: (100.0, -150.0, 150.0)}

# per-300 km line at 500 kV, 10 Hz
LF_LINE = {"r_ohm": 9.0, "x_ohm": 16.5, "b_us": 224.0, "i_max_pu": 6.0}
LF_EDGES = [(58, 59), (58, 62), (59, 60), (60, 63), (60, 61), (61, 64), (61, 65)]
WIND = {59: 255.0, 60: 255.0, 61: 255.0}

SWITCHING = {"a0_pu": 11.033e-3, "a1_pu": 3.464e-3, "a2_rect_pu": 4.400e-3, "a2_inv_pu": 6.667e-3}
CONVERTERS = [
    # name, bus_s, bus_l, v_dc kV, k_m, i_max pu, S MVA, p_s MW, q_s Mvar (case set-points)
    ("A", 8, 58, 70.0, 0.61, 3.0, 300.0, None, -110.0),
    ("B", 12, 62, 70.0, 0.61, 3.0, 300.0, -280.0, -80.0),
    ("C", 52, 63, 60.0, 0.71, 2.0, 200.0, -50.0, -20.0),
    ("D", 16, 64, 60.0, 0.71, 2.0, 200.0, -50.0, -40.0),
    ("E", 17, 65, 60.0, 0.71, 2.0, 200.0, -50.0, -40.0),
]
DC_BASE_KV = 33.0
PROFILE = [0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.77, 0.84, 0.88, 0.90, 0.91,
           0.90, 0.89, 0.90, 0.94, 1.00, 0.99, 0.96, 0.92, 0.86, 0.79, 0.71, 0.65]


def build() -> dict:
    raw = json.loads((HERE / "data" / "ieee57.json").read_text())
    total = sum(b[2] for b in raw["bus"])
    scale = PEAK_MW / total
    gens = {int(g[0]): g for g in raw["gen"] if int(g[0]) not in REMOVED_GENS}
    buses = []
    for b in raw["bus"]:
        bid = int(b[0])
        kind = "slack" if b[1] == 3 else ("voltage_controlled" if bid in gens else "load")
        d = {"id": bid, "kind": kind, "v_min": b[12], "v_max": b[11],
             "p_load_mw": round(b[2] * scale, 6), "q_load_mvar": round(b[3] * scale, 6)}
        if kind != "load":
            d["v_ref"] = gens[bid][5]
        buses.append(d)
    lines = [{"from": int(r[0]), "to": int(r[1]), "r_pu": r[2], "x_pu": r[3], "b_pu": r[4],
              "tap": r[8] or 1.0}
             for r in raw["branch"] if r[10] == 1]
    gen_rows = []
    for bid, g in gens.items():
        pmax, qmin, qmax = HF_LIMITS[bid]
        gen_rows.append({"bus": bid, "p_min_mw": 0.0, "p_max_mw": pmax, "q_min_mvar": qmin,
                         "q_max_mvar": qmax, "p_set_mw": HF_DISPATCH[bid] or 0.0, "q_set_mvar": 0.0})
    caps = [{"bus": bus, "steps_mvar": [round(q * k / 3, 6) for k in range(4)], "q_prev_mvar": q}
            for bus, q in CAP_RATINGS.items()]
    hf = {"id": 1, "name": "50 Hz, modified IEEE 57-bus", "frequency_hz": 50.0, "base_kv": 138.0,
          "buses": buses, "lines": lines, "generators": gen_rows, "capacitors": caps}

    lf_buses = [{"id": 58, "kind": "slack", "v_ref": 1.02, "v_min": 0.94, "v_max": 1.06}]
    lf_buses += [{"id": b, "kind": "voltage_controlled", "v_ref": 1.02, "v_min": 0.94, "v_max": 1.06}
                 for b in WIND]
    lf_buses += [{"id": b, "kind": "load", "v_min": 0.94, "v_max": 1.06} for b in (62, 63, 64, 65)]
    lf = {"id": 2, "name": "10 Hz, 500 kV", "frequency_hz": 10.0, "base_kv": 500.0, "buses": lf_buses,
          "lines": [{"from": a, "to": b, **LF_LINE} for a, b in LF_EDGES],
          "generators": [{"bus": b, "p_min_mw": 0.0, "p_max_mw": 400.0, "q_min_mvar": -250.0,
                          "q_max_mvar": 250.0, "p_set_mw": p, "q_set_mvar": 0.0} for b, p in WIND.items()],
          "capacitors": []}
    convs = []
    for i, (name, bs, bl, vdc, km, imax, s, ps, qs) in enumerate(CONVERTERS, start=1):
        slack = ps is None
        convs.append({
            "id": i, "name": name, "bus_s": bs, "bus_l": bl,
            "r1_pu": 0.0001, "x1_pu": 0.08, "r2_pu": 0.0001, "x2_pu": 0.08, **SWITCHING,
            "v_dc_kv": vdc, "dc_base_kv_s": DC_BASE_KV, "dc_base_kv_l": DC_BASE_KV,
            "k_m": km, "i_c_max_pu": imax, "s_rated_mva": s, "k_q": 0.5,
            "is_lf_slack": slack, "rectifier_side": "l",
            "mode": ({"side1": "PQ", "side2": "VVdc", "q_s_mvar": qs, "v_l_pu": 1.02} if slack else
                     {"side1": "PQ", "side2": "QVdc", "p_s_mw": ps, "q_s_mvar": qs, "q_l_mvar": 0.0}),
        })
    return {
        "schema_version": "1.0",
        "name": "case57_mf",
        "base_mva": 100.0,
        "grids": [hf, lf],
        "converters": convs,
        "profile": {"multipliers": PROFILE, "labels": [f"{h:02d}:00" for h in range(1, 25)]},
        "options": {"alpha1": 1.0, "alpha2": 0.0, "tol": 1e-6, "starts": ["flat", "warm", "prev"]},
    }


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print(f"wrote {out}")
