#!/usr/bin/env python3
"""Run the finite-difference gradient suite, optionally restricted to some checks."""

import argparse
import sys

from pillarnext.gradcheck import registered_cases, run_suite, write_report

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", help=f"subset of: {', '.join(c.name for c in registered_cases())}")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tol", type=float, default=1e-5)
    ap.add_argument("--report", default="gradcheck.csv")
    args = ap.parse_args()

    known = {c.name for c in registered_cases()}
    unknown = sorted(set(args.names) - known)
    if unknown:
        ap.error(f"unknown checks: {unknown}")
    reports = run_suite(args.seed, args.tol, args.names or None)
    write_report(reports, args.report)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} {r.max_error:.3e}")
    sys.exit(0 if all(r.passed for r in reports) else 2)
