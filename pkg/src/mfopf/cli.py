"""Command-line entry point.

Exit codes: 0 converged/valid, 1 usage, 2 validation failure, 3 solver
non-convergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import ipm
from .formulation import ObjectiveSpec
from .horizon import LoadProfile, run_horizon
from .io import (CaseError, emit_plot_data, emit_region, opf_to_dict, parse_case, read_results,
                 write_json, write_results)
from .network import validate_system
from .opf import START_ORDER, run_opf
from .verify import VerificationError, verify_file

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("mfopf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _starts(text: str) -> tuple:
    out = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in out if s not in START_ORDER]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"starts must be drawn from {','.join(START_ORDER)}")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mfopf", description="Multi-frequency AC OPF with back-to-back converters")
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="parse and validate a case file")
    p.add_argument("--case", required=True)

    p = sub.add_parser("pf", help="power flow at the case set-points")
    p.add_argument("--case", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")

    p = sub.add_parser("opf", help="single-period OPF")
    p.add_argument("--case", required=True)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--starts", type=_starts)
    p.add_argument("--tol", type=float)
    p.add_argument("--fixed-converters", action="store_true",
                   help="hold converter set-points at their scheduled values")
    p.add_argument("--out")

    p = sub.add_parser("horizon", help="run the load profile step by step")
    p.add_argument("--case", required=True)
    p.add_argument("--mode", choices=("pf", "opf"), required=True)
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--starts", type=_starts)
    p.add_argument("--tol", type=float)
    p.add_argument("--fixed-converters", action="store_true")
    p.add_argument("--out")
    p.add_argument("--plots", help="directory for plot-data CSVs")
    p.add_argument("--label", help="series label in plot data (default: mode)")

    p = sub.add_parser("region", help="converter operating-region polyline")
    p.add_argument("--case", required=True)
    p.add_argument("--converter", type=int, required=True)
    p.add_argument("--side", choices=("s", "l"), required=True)
    p.add_argument("--v", type=float, default=1.0)
    p.add_argument("--solution", help="OPF solution file; appends the operating point")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", help="independent KKT check of an OPF solution file")
    p.add_argument("--solution", required=True)
    return ap


def _opts(case, args) -> tuple[ObjectiveSpec, ipm.IpmOptions]:
    o = case.options
    a1 = o.alpha1 if args.alpha1 is None else args.alpha1
    a2 = o.alpha2 if args.alpha2 is None else args.alpha2
    tol = o.tol if args.tol is None else args.tol
    starts = args.starts or o.starts
    opts = ipm.IpmOptions(tol_feas=tol, tol_gap=tol, tol_obj=tol, tol_stat=tol, max_iters=o.max_iters,
                          starts=tuple(starts))
    return ObjectiveSpec(a1, a2), opts


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose",)}


def cmd_validate(args) -> int:
    case = parse_case(args.case)
    rep = validate_system(case.system)
    s = case.system
    nb = sum(len(g.buses) for g in s.grids)
    print(f"{args.case}: {len(s.grids)} grids, {nb} buses, {len(s.converters)} converters")
    print(rep)
    return EXIT_OK if rep.ok else EXIT_INVALID


def cmd_pf(args) -> int:
    case = parse_case(args.case)
    res = run_horizon(case.system, LoadProfile((1.0,), ("base",)), "pf", pf_tol=args.tol)
    st = res.steps[0]
    print(f"pf {st.status}: {st.iterations} iterations, losses {st.losses_mw:.3f} MW "
          f"({st.losses_pct:.3f}%), load-bus V in [{st.v_min:.4f}, {st.v_max:.4f}], "
          f"{st.violations} violations")
    if args.out:
        write_results(res, args.out, config=_config(args))
    return EXIT_NONCONVERGED if st.failed else EXIT_OK


def cmd_opf(args) -> int:
    case = parse_case(args.case)
    obj, opts = _opts(case, args)
    res = run_opf(case.system, obj, opts, converter_dispatch=not args.fixed_converters)
    rep = res.report
    base = case.system.base_mva
    print(f"opf {rep.status} (start {rep.start}): {rep.iterations} iterations, objective "
          f"{rep.objective:.8f}, losses {res.losses() * base:.3f} MW")
    for lbl, r in res.runs:
        print(f"  {lbl}: {r.status} after {r.iterations} iterations")
    if args.out:
        write_json(opf_to_dict(res, _config(args)), args.out)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_horizon(args) -> int:
    case = parse_case(args.case)
    if not case.profile:
        print(f"{args.case}: case has no load profile", file=sys.stderr)
        return EXIT_INVALID
    obj, opts = _opts(case, args)
    res = run_horizon(case.system, LoadProfile(case.profile, case.profile_labels), args.mode,
                      alphas=(obj.alpha1, obj.alpha2), opts=opts,
                      converter_dispatch=not args.fixed_converters, starts=opts.starts)
    for s in res.steps:
        print(f"{s.step:3d} {s.label:>6} x{s.multiplier:.2f} {s.status:<18} losses {s.losses_mw:9.3f} MW "
              f"({s.losses_pct:6.3f}%) Vmax {s.v_max:.4f} viol {s.violations}")
    print(f"switching counts {res.switching_counts}, total losses {res.total_losses_mwh():.2f} MWh")
    if args.out:
        write_results(res, args.out, config=_config(args))
    if args.plots:
        emit_plot_data({args.label or args.mode: res}, args.plots)
    return EXIT_NONCONVERGED if any(s.failed for s in res.steps) else EXIT_OK


def cmd_region(args) -> int:
    case = parse_case(args.case)
    conv = {c.id: c for c in case.system.converters}
    if args.converter not in conv:
        print(f"converter {args.converter} not in case", file=sys.stderr)
        return EXIT_INVALID
    point = None
    if args.solution:
        doc = read_results(args.solution)
        rec = [c for c in doc["solution"]["converters"] if c["id"] == args.converter]
        if rec:
            point = (rec[0][f"p_{args.side}"], rec[0][f"q_{args.side}"])
    reg = emit_region(conv[args.converter], args.v, args.side, args.out, operating_point=point)
    print(f"region for converter {args.converter} side {args.side}: "
          f"{'empty' if reg.empty else f'{len(reg.points)} boundary points'} -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cert = verify_file(args.solution)
    print(cert.summary())
    for n in cert.notes:
        print(f"  note: {n}")
    return EXIT_OK if cert.passed() and not cert.notes else EXIT_NONCONVERGED


COMMANDS = {"validate": cmd_validate, "pf": cmd_pf, "opf": cmd_opf, "horizon": cmd_horizon,
            "region": cmd_region, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (CaseError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
