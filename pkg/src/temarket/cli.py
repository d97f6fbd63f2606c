"""Command line entry point.

Subcommands::

    temarket run CONFIG [--out DIR] [--seed N] [--steps N] [--tol X]
    temarket validate CASE
    temarket pf CASE
    temarket check RESULTS_DIR

Exit codes: 0 success, 2 configuration or case error, 3 infeasible,
4 solver failure, 5 invariant violation found by ``check``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import acpf
from .config import ConfigInvalid, load_config
from .network import CaseError, build_admittance, read_case, validate_radial
from .reporting import IoFailure, RunFailed, check_reports, emit_reports, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4, 5


def _run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.steps is not None:
            cfg = cfg.truncated(args.steps)
    except ConfigInvalid as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.tol is not None:
        cfg = replace(cfg, tol=args.tol)
    if args.verbose:
        cfg = replace(cfg, verbose=True)
    out = Path(args.out) if args.out else cfg.output
    t0 = time.perf_counter()
    try:
        bundle = run_scenario(cfg)
    except ConfigInvalid as exc:
        for msg in exc.problems:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        print(f"run failed at {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if exc.infeasible else EXIT_SOLVER
    try:
        paths = emit_reports(bundle, out)
    except IoFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    tr, al = bundle.trade, bundle.allocation
    print(f"completed {cfg.steps} steps in {time.perf_counter() - t0:.1f} s")
    print(f"total stage-2 profit: {np.nansum(tr.profit):.6f} $")
    print(f"two-sided trading steps: {int(al.two_sided.sum())}")
    print(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


def _validate(args) -> int:
    try:
        net = read_case(args.case)
    except (OSError, CaseError) as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    findings = validate_radial(net)
    for msg in findings:
        print(msg)
    if findings:
        return EXIT_CONFIG
    print(f"{net.n_bus} buses, {len(net.branches)} branches, radial; "
          f"base {net.base_MVA:g} MVA / {net.base_kV:g} kV; load {net.load_kw().sum():.1f} kW, "
          f"{net.load_kvar().sum():.1f} kvar")
    return EXIT_OK


def _pf(args) -> int:
    try:
        net = read_case(args.case)
    except (OSError, CaseError) as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    adm = build_admittance(net)
    try:
        v, rep = acpf.solve_newton_pf(net, adm, acpf.InjectionSet.from_loads(net), tol=args.tol or 1e-8)
    except acpf.PowerFlowError as exc:
        print(f"power flow failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    flows = acpf.branch_flows(net, adm, v)
    vm = v.magnitude
    k = int(np.argmin(vm))
    print(f"converged in {rep.iterations} iterations (mismatch {rep.mismatch:.2e} pu, {rep.seconds * 1e3:.1f} ms)")
    print(f"total loss: {flows.total_loss:.4f} kW, {float((flows.Q_from + flows.Q_to).sum()):.4f} kvar")
    print(f"minimum |V|: {vm[k]:.6f} pu at bus {net.bus_ids[k]}")
    return EXIT_OK


def _check(args) -> int:
    try:
        findings = check_reports(args.results)
    except IoFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    for msg in findings:
        print(msg)
    if findings:
        print(f"{len(findings)} findings", file=sys.stderr)
        return EXIT_INVARIANT
    print("all invariants hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="temarket", description="Three-stage energy trading on a radial feeder.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve both market stages and the allocation, write reports")
    r.add_argument("config", help="YAML run configuration")
    r.add_argument("--out", help="output directory (default: the config's output entry)")
    r.add_argument("--seed", type=int, help="seed for the randomized solver starts")
    r.add_argument("--steps", type=int, help="only solve the first N steps")
    r.add_argument("--tol", type=float, help="solver tolerance")
    r.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    r.set_defaults(func=_run)

    v = sub.add_parser("validate", help="parse a case file and check it is radial")
    v.add_argument("case")
    v.set_defaults(func=_validate)

    p = sub.add_parser("pf", help="Newton power flow at the case's base load")
    p.add_argument("case")
    p.add_argument("--tol", type=float, help="mismatch tolerance, pu")
    p.set_defaults(func=_pf)

    c = sub.add_parser("check", help="re-verify market invariants from a results directory")
    c.add_argument("results")
    c.set_defaults(func=_check)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
