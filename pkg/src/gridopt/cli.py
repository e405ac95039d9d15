"""Batch command-line frontend: power flow, OPF/SCOPF solves, backend benchmarks.

Commands
    pf     --case FILE                    print the Newton power flow solution
    solve  --case FILE --mode MODE ...    solve and write results + iteration log
    bench  --case FILE ...                time the backends across worker counts

Exit codes: 0 success, 2 configuration/parse error, 3 power flow divergence,
4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import grid_model as gm
from . import ipm_core, opf_problems, powerflow, reduced_space

RESULTS_SCHEMA = {
    "type": "object",
    "required": ["case", "mode", "backend", "status", "objective",
                 "iterations", "base_mva", "buses", "generators",
                 "binding_constraints"],
    "properties": {
        "case": {"type": "string"},
        "mode": {"type": "string", "enum": ["opf", "scopf", "reduced"]},
        "backend": {"type": "string"},
        "status": {"type": "string"},
        "objective": {"type": "number"},
        "iterations": {"type": "integer", "minimum": 0},
        "base_mva": {"type": "number"},
        "buses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "vm", "va_deg"],
                "properties": {
                    "id": {"type": "integer"},
                    "vm": {"type": "number"},
                    "va_deg": {"type": "number"},
                },
            },
        },
        "generators": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bus", "pg_mw", "qg_mvar"],
            },
        },
        "binding_constraints": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_results(doc: dict) -> None:
    """Check a results document against RESULTS_SCHEMA (raises on failure)."""
    import jsonschema

    jsonschema.validate(doc, RESULTS_SCHEMA)


def _parse_overrides(pairs: list[str]) -> dict:
    known = {f.name: f.type for f in fields(ipm_core.IpmOptions)}
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--opt expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        if key not in known:
            raise ValueError(f"unknown option {key!r}")
        current = getattr(ipm_core.IpmOptions(), key)
        if isinstance(current, bool):
            out[key] = val.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            out[key] = int(val)
        elif isinstance(current, float):
            out[key] = float(val)
        else:
            out[key] = val
    return out


def _load(case_path: str) -> gm.GridCase:
    path = Path(case_path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {case_path}")
    return gm.load_case(path)


def _contingency_list(grid: gm.GridCase, spec: str,
                      q_viol_tol: float) -> list[gm.Contingency]:
    """Parse a contingency spec: comma-separated branch indices (0-based),
    'all' for every in-service branch, or 'screened:all' to screen first."""
    screen = False
    if spec.startswith("screened:"):
        screen = True
        spec = spec.split(":", 1)[1]
    if spec == "all":
        cands = [gm.Contingency(k) for k in grid.in_service_branches()]
    else:
        cands = [gm.Contingency(int(tok)) for tok in spec.split(",") if tok]
    cands = [c.with_default_label() for c in cands]
    if screen:
        cands = gm.screen_contingencies(grid, cands, q_viol_tol=q_viol_tol)
    return cands


def cmd_pf(args) -> int:
    try:
        grid = _load(args.case)
        Y = gm.build_admittance(grid)
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        sol = powerflow.newton_pf(grid, Y, tol=args.tol,
                                  max_iter=args.max_iter)
    except (powerflow.PfDivergence, powerflow.SingularJacobian) as e:
        print(f"power flow failed: {e}", file=sys.stderr)
        return 3
    mis = powerflow.mismatch(grid, Y, sol.vm, sol.va, sol.pg, sol.qg)
    print(f"converged in {sol.iterations} iterations, "
          f"max mismatch {np.max(np.abs(mis)):.3e}")
    print(f"{'bus':>6} {'vm [pu]':>10} {'va [deg]':>10}")
    for bus, vm, va in zip(grid.buses, sol.vm, sol.va):
        print(f"{bus.id:>6} {vm:>10.5f} {np.rad2deg(va):>10.4f}")
    print(f"{'gen bus':>8} {'P [MW]':>10} {'Q [MVAr]':>10}")
    base = grid.base_mva
    for g, p, q in zip(grid.generators, sol.pg, sol.qg):
        print(f"{g.bus:>8} {p * base:>10.3f} {q * base:>10.3f}")
    return 0


def _binding_constraints(result, problem, grid) -> list[str]:
    out = []
    x = result.iterate.x
    h = problem.h(x)
    for i, v in enumerate(h):
        if v > -1e-6:
            out.append(f"h[{i}]")
    lam_tol = 1e-5
    z = result.iterate.z_lo - result.iterate.z_hi
    for i in np.flatnonzero(np.abs(z) > lam_tol):
        d_lo = x[i] - problem.lb[i]
        d_hi = problem.ub[i] - x[i]
        if min(d_lo, d_hi) < 1e-6:
            out.append(f"bound[{i}]")
    return out


def _results_doc(args, grid, problem, result, mode) -> dict:
    base = grid.base_mva
    if mode == "reduced":
        rp = problem.meta["reduced"]
        states = reduced_space.evaluate_states(rp, result.iterate.x)
        st = states[0]
        vm, va = st.vm, st.va
        pg, qg = st.pg.copy(), st.qg.copy()
        pg[rp.part.pv_gens] = rp.split_u(result.iterate.x)[1]
    else:
        maps = problem.meta["maps"]
        sm = maps[0]
        x = result.iterate.x
        vm, va = x[sm.vm], x[sm.th]
        pg, qg = x[sm.p], x[sm.q]
    buses = [
        {"id": b.id, "vm": float(v), "va_deg": float(np.rad2deg(a))}
        for b, v, a in zip(grid.buses, vm, va)
    ]
    gens = [
        {"bus": g.bus, "pg_mw": float(p * base), "qg_mvar": float(q * base)}
        for g, p, q in zip(grid.generators, pg, qg)
    ]
    return {
        "case": grid.name,
        "mode": mode,
        "backend": args.backend,
        "status": result.status,
        "objective": float(result.objective),
        "iterations": int(result.iterations),
        "base_mva": float(base),
        "buses": buses,
        "generators": gens,
        "binding_constraints": _binding_constraints(result, problem, grid),
    }


def _run_solve(args):
    grid = _load(args.case)
    overrides = _parse_overrides(args.opt)
    overrides.setdefault("workers", args.workers)
    options = ipm_core.IpmOptions(**overrides)
    mode = args.mode
    if mode == "opf":
        problem = opf_problems.build_opf(grid)
    elif mode == "scopf":
        cands = _contingency_list(grid, args.contingencies or "screened:all",
                                  args.q_viol_tol)
        problem = opf_problems.build_scopf(grid, cands)
    elif mode == "reduced":
        if args.backend.startswith("schur"):
            raise ValueError("reduced mode uses the dense direct backend; "
                             "the reduced KKT carries no arrowhead structure")
        cands = _contingency_list(grid, args.contingencies or "",
                                  args.q_viol_tol) if args.contingencies else []
        rp = reduced_space.build_reduced(grid, cands, lump=args.lump)
        result = reduced_space.reduced_solve(rp, options)
        return grid, result.problem, result
    else:
        raise ValueError(f"unknown mode {mode!r}")
    result = ipm_core.solve(problem, options, backend=args.backend)
    return grid, problem, result


def cmd_solve(args) -> int:
    try:
        grid, problem, result = _run_solve(args)
    except (gm.GridError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    doc = _results_doc(args, grid, problem, result, args.mode)
    validate_results(doc)
    out_path = Path(args.out or f"{grid.name}-{args.mode}.json")
    out_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    log_path = Path(args.log or f"{grid.name}-{args.mode}.csv")
    log_path.write_text(ipm_core.log_to_csv(result.log))
    print(f"{result.status}: objective {result.objective:.6e} "
          f"in {result.iterations} iterations")
    print(f"results -> {out_path}, iterations -> {log_path}")
    return 0 if result.success else 4


def cmd_bench(args) -> int:
    try:
        grid = _load(args.case)
        overrides = _parse_overrides(args.opt)
        backends = args.backends.split(",")
        workers_list = [int(w) for w in args.workers_list.split(",")]
        for be in backends:
            if be not in ipm_core.BACKENDS:
                raise ValueError(f"unknown backend {be!r}")
        if args.mode == "scopf":
            cands = _contingency_list(
                grid, args.contingencies or "screened:all", args.q_viol_tol)
            problem = opf_problems.build_scopf(grid, cands)
        else:
            problem = opf_problems.build_opf(grid)
    except (gm.GridError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    rows = []
    for be in backends:
        for workers in workers_list:
            options = ipm_core.IpmOptions(**{**overrides, "workers": workers})
            t0 = time.perf_counter()
            result = ipm_core.solve(problem, options, backend=be)
            total = time.perf_counter() - t0
            rows.append({
                "backend": be,
                "workers": workers,
                "total_s": round(total, 6),
                "kkt_s": round(result.timings["kkt_s"], 6),
                "schur_assembly_s": round(result.timings["schur_assembly_s"], 6),
                "solve_s": round(result.timings["solve_s"], 6),
                "iterations": result.iterations,
            })
            print(f"{be:15s} workers={workers} total={total:.3f}s "
                  f"iters={result.iterations}")
    out_path = Path(args.out or f"{grid.name}-bench.csv")
    with out_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"bench table -> {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridopt",
        description="Structure-exploiting interior-point solver for AC "
                    "optimal power flow and security-constrained OPF.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pf = sub.add_parser("pf", help="Newton power flow")
    p_pf.add_argument("--case", required=True, help="MATPOWER .m case file")
    p_pf.add_argument("--tol", type=float, default=1e-10)
    p_pf.add_argument("--max-iter", type=int, default=20)
    p_pf.set_defaults(func=cmd_pf)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True, help="MATPOWER .m case file")
    common.add_argument("--contingencies", default=None,
                        help="comma-separated branch indices (0-based), "
                             "'all', or 'screened:all'")
    common.add_argument("--q-viol-tol", type=float, default=10.0,
                        help="screening tolerance on reactive violations "
                             "(MVAr)")
    common.add_argument("--opt", action="append", metavar="KEY=VALUE",
                        help="solver option override (repeatable)")
    common.add_argument("--seed", type=int, default=42,
                        help="seed for any randomized utilities")

    p_solve = sub.add_parser("solve", parents=[common],
                             help="solve OPF / SCOPF / reduced-space OPF")
    p_solve.add_argument("--mode", choices=["opf", "scopf", "reduced"],
                         default="opf")
    p_solve.add_argument("--backend", choices=list(ipm_core.BACKENDS),
                         default=ipm_core.DIRECT_FULL)
    p_solve.add_argument("--workers", type=int, default=1)
    p_solve.add_argument("--lump", action="store_true",
                         help="lump line constraints (reduced mode)")
    p_solve.add_argument("--out", default=None, help="results JSON path")
    p_solve.add_argument("--log", default=None, help="iteration CSV path")
    p_solve.set_defaults(func=cmd_solve)

    p_bench = sub.add_parser("bench", parents=[common],
                             help="time the KKT backends")
    p_bench.add_argument("--mode", choices=["opf", "scopf"], default="scopf")
    p_bench.add_argument("--backends",
                         default="direct,direct-reduced,schur-std,schur-aug")
    p_bench.add_argument("--workers-list", default="1,2,4")
    p_bench.add_argument("--out", default=None, help="bench CSV path")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    np.random.seed()  # CLI paths are deterministic; seed only guards utilities
    parser = build_parser()
    args = parser.parse_args(argv)
    rng_seed = getattr(args, "seed", 42)
    np.random.seed(rng_seed)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
