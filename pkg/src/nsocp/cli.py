"""Command-line driver for convergence studies.

Example::

    nsocp --problem example1 --scheme semi --quadrature s5c --max-iters 30 --out run.csv
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .adaptivity import LoopConfig, run_loop
from .estimators import write_indicators
from .manufactured import example1, poly2d, verify_manufactured
from .mesh import write_mesh
from .reporting import StudyOutput, write_csv

PROBLEMS = {"example1": example1, "poly2d": poly2d}

EXIT_SOLVER = 3
EXIT_GATE = 4


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsocp", description=__doc__.splitlines()[0])
    ap.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
    ap.add_argument("--scheme", choices=("fully", "semi"), default="fully")
    ap.add_argument("--quadrature", choices=("s19", "s5", "s5c"), default=None,
                    help="control-term quadrature (semi scheme only, default s19)")
    ap.add_argument("--refine", choices=("adaptive", "uniform"), default="adaptive")
    ap.add_argument("--max-ndof", type=int, default=None)
    ap.add_argument("--max-iters", type=int, default=10)
    ap.add_argument("--alpha", type=float, default=None)
    ap.add_argument("--nu", type=float, default=None)
    ap.add_argument("--bounds", type=float, nargs=2, metavar=("A", "B"), default=None)
    ap.add_argument("--out", type=Path, default=None, help="CSV file for the records")
    ap.add_argument("--dump-mesh", action="store_true", help="write the mesh of every iteration")
    ap.add_argument("--dump-indicators", action="store_true",
                    help="write per-cell squared indicators of every iteration")
    ap.add_argument("--initial-refinements", type=int, default=2)
    ap.add_argument("--marking-fraction", type=float, default=0.5)
    ap.add_argument("--eoc-window", type=int, default=5)
    ap.add_argument("--verbose", action="store_true")
    return ap


def run_cli(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.quadrature is not None and args.scheme == "fully":
        ap.error("--quadrature applies to --scheme semi only")
    if args.max_iters is not None and args.max_iters < 1:
        ap.error("--max-iters must be positive")
    if args.bounds is not None and args.bounds[0] > args.bounds[1]:
        ap.error("--bounds needs A <= B")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s", stream=sys.stderr)

    kw = {}
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    if args.nu is not None:
        kw["nu"] = args.nu
    if args.bounds is not None:
        kw["lower"] = (args.bounds[0],) * 2
        kw["upper"] = (args.bounds[1],) * 2
    try:
        exact, data = PROBLEMS[args.problem](**kw)
    except ValueError as exc:
        ap.error(str(exc))

    report = verify_manufactured(exact, data)
    if not report.passed:
        print(f"manufactured data check failed: state {report.max_state:.3e}, "
              f"adjoint {report.max_adjoint:.3e}", file=sys.stderr)
        return EXIT_GATE

    try:
        config = LoopConfig(data=data, mesh0=exact.mesh0(), scheme=args.scheme,
                            quadrature=args.quadrature or "s19",
                            marking_fraction=args.marking_fraction, max_iters=args.max_iters,
                            max_ndof=args.max_ndof, refine=args.refine,
                            initial_refinements=args.initial_refinements, exact=exact)
    except ValueError as exc:
        ap.error(str(exc))

    out = args.out or Path("study.csv")
    stem = out.with_suffix("")

    def dump(rec, mesh, sol, ind):
        if args.dump_mesh:
            write_mesh(mesh, f"{stem}_mesh_{rec.iter:03d}.txt")
        if args.dump_indicators:
            write_indicators(ind, f"{stem}_indicators_{rec.iter:03d}.csv")

    result = run_loop(config, on_iteration=dump)
    snapshot = config.snapshot()
    snapshot["manufactured_residual"] = max(report.max_state, report.max_adjoint)
    study = StudyOutput(snapshot, result.records, k=args.eoc_window)
    if result.failure:
        snapshot["failure"] = result.failure
    write_csv(study, out)

    print(f"{len(study.records)} iterations written to {out}")
    for name, slope in study.slopes().items():
        print(f"  EOC {name:10s} " + ("n/a" if slope is None else f"{slope:+.4f}"))
    if len(study.records) >= 1:
        mean, std = study.effectivity_stats(10)
        if np.isfinite(mean):
            print(f"  effectivity (last 10): mean {mean:.4f} std {std:.4f}")
    if result.failure:
        print(f"solver failure: {result.failure}", file=sys.stderr)
        return EXIT_SOLVER
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
