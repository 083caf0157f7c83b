"""Per-iteration Hessian assembly time: precomputed constant-part cache vs
rebuilding every constant constraint Hessian.

Usage: python scripts/hessian_cache_timing.py [--repeats 50]
"""
import argparse
from pathlib import Path

from mfopf import ipm
from mfopf.formulation import ObjectiveSpec, OpfProblem, time_hessian_assembly
from mfopf.io import parse_case

CASE = Path(__file__).resolve().parent.parent / "src" / "mfopf" / "cases" / "case57_mf.json"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--case", default=str(CASE))
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    prob = OpfProblem(parse_case(args.case).system, ObjectiveSpec(1.0, 0.0))
    x, rep = ipm.solve(prob, prob.flat_start())
    y = rep.duals["y"]
    zh = rep.duals["z_u_ineq"] - rep.duals["z_l_ineq"]
    cached, rebuilt = time_hessian_assembly(prob, x, y, zh, args.repeats)
    print(f"n={prob.n} equality rows={prob.m_eq} inequality rows={prob.m_ineq} (solve: {rep.status})")
    print(f"cached  {cached * 1e3:8.3f} ms/assembly")
    print(f"rebuilt {rebuilt * 1e3:8.3f} ms/assembly")
    print(f"ratio   {cached / rebuilt:.4f}  ({100 * (1 - cached / rebuilt):.1f}% saved)")


if __name__ == "__main__":
    main()
