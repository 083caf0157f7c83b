"""Paired horizon runs with and without the capacitor switching penalty.

Usage: python scripts/switching_penalty.py [--alpha2 0.2]
"""
import argparse
from pathlib import Path

from mfopf.horizon import LoadProfile, run_horizon
from mfopf.io import parse_case

CASE = Path(__file__).resolve().parent.parent / "src" / "mfopf" / "cases" / "case57_mf.json"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--case", default=str(CASE))
    ap.add_argument("--alpha2", type=float, default=0.2)
    args = ap.parse_args()
    case = parse_case(args.case)
    prof = LoadProfile(case.profile, case.profile_labels)
    out = {}
    for a2 in (0.0, args.alpha2):
        res = run_horizon(case.system, prof, "opf", alphas=(1.0, a2))
        out[a2] = res
        print(f"alpha2={a2:<5} switching per bank {res.switching_counts} total {sum(res.switching_counts):3d}  "
              f"energy losses {res.total_losses_mwh():.3f} MWh  failed {sum(s.failed for s in res.steps)}")
    lo, hi = out[0.0].total_losses_mwh(), out[args.alpha2].total_losses_mwh()
    print(f"loss difference {100 * (hi - lo) / lo:+.3f}%")
    for t, (s0, s1) in enumerate(zip(out[0.0].steps, out[args.alpha2].steps)):
        q0 = " ".join(f"{q * 100:6.2f}" for q in s0.q_sh)
        q1 = " ".join(f"{q * 100:6.2f}" for q in s1.q_sh)
        print(f"{t:3d}  {q0}  |  {q1}")


if __name__ == "__main__":
    main()
