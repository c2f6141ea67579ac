"""Command line interface.

Subcommands: roots, indexset, expand, solve, verify.  Exit codes: 0 all
checks pass, 1 a configured check failed, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import (ConvergenceError, DegenerateModelError, InputError,
                     NonIntegrableForcing, PhgError, SolvabilityViolation)
from .formal import ModelProblem, formal_expansion
from .harness import (RunConfig, SCENARIOS, config_from_toml, emit_report,
                      load_model_file, load_source_file, run_pipeline,
                      run_scenario)
from .indices import build_index_set, characteristic_roots
from .modeode import Grid, picard_solve


def _parse_grid_spec(spec):
    """Parse "x0=0.1,xmin=1e-6,n=512" into keyword arguments."""
    out = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        try:
            key, val = part.split("=")
        except ValueError:
            raise InputError(f"bad grid entry {part!r}; want key=value")
        key = key.strip()
        if key == "x0":
            out["x0"] = float(val)
        elif key == "xmin":
            out["xmin"] = float(val)
        elif key in ("n", "count"):
            out["count"] = int(val)
        else:
            raise InputError(f"unknown grid key {key!r}")
    return out


def _out_dir(args, default="phg-out"):
    if getattr(args, "output", None):
        return args.output
    return os.environ.get("PHG_OUTPUT_DIR", default)


def _cmd_roots(args):
    r = characteristic_roots(args.lam)
    exact = ""
    if r.exact_m_bar is not None:
        exact = f"  (exact {r.exact_m_bar} / {r.exact_m_under})"
    print(f"lambda = {args.lam!r}")
    print(f"m_bar   = {r.m_bar!r}{exact}")
    print(f"m_under = {r.m_under!r}")
    return 0


def _cmd_indexset(args):
    model = load_model_file(args.model)
    idx = build_index_set(model, args.cutoff)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["value", "exact", "resonant_modes", "eps"])
    ledger = {k: eps for k, _, eps in idx.epsilon_ledger()}
    for el in idx.elements:
        w.writerow([repr(el.value),
                    "" if el.exact is None else str(el.exact),
                    ";".join(str(m) for m in el.resonant_modes),
                    repr(ledger[el.value]) if el.value in ledger else ""])
    return 0


def _build_problem(args):
    model = load_model_file(args.model)
    source, c0, strict = load_source_file(model, args.source)
    idx = build_index_set(model, args.order + 1.5)
    return ModelProblem(model, idx, source, c0, strict=strict)


def _cmd_expand(args):
    problem = _build_problem(args)
    if args.order not in problem.index_set:
        raise InputError(f"order {args.order} is not an element of the index set")
    sol = formal_expansion(problem, args.order)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    doc = {
        "order": sol.order,
        "psi": sol.psi.to_json_dict(),
        "log_bounds": sorted([i, n] for i, n in sol.log_bounds.items()),
        "free_components": [
            {"i": f.exponent, "eigenvalue": f.eigenvalue, "modes": list(f.modes)}
            for f in sol.free_components],
        "steps": sol.n_steps,
    }
    with open(os.path.join(out, "formal.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "coefficients.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "mode", "value"])
        for i, j, mode, value in sol.coefficient_rows():
            w.writerow([repr(i), j, mode, repr(value)])
    print(f"formal expansion to order {args.order}: {len(sol.psi.terms)} terms, "
          f"{sol.n_steps} steps -> {out}")
    return 0


def _cmd_solve(args):
    problem = _build_problem(args)
    grid = Grid.geometric(**_parse_grid_spec(args.grid))
    sol = formal_expansion(problem, args.order)
    boundary = sol.evaluate(np.array([grid.x0]))[:, 0]
    result = picard_solve(problem, grid, boundary, tol=args.tol,
                          max_iter=args.max_iter)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    doc = {
        "iterations": result.iterations,
        "defect": result.defect,
        "grid": {"x0": grid.x0, "xmin": grid.xmin, "count": grid.count},
        "modes": [
            {"mode": s.mode, "eigenvalue": s.eigenvalue,
             "m_bar": s.roots.m_bar, "m_under": s.roots.m_under,
             "boundary_datum": s.boundary_datum,
             "values": [float(v) for v in s.values]}
            for s in result.solutions],
    }
    with open(os.path.join(out, "solution.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "solution.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "mode", "value"])
        for s in result.solutions:
            for x, v in zip(grid.points, s.values):
                w.writerow([repr(float(x)), s.mode, repr(float(v))])
    print(f"picard converged in {result.iterations} sweeps "
          f"(defect {result.defect:.3e}) -> {out}")
    return 0


def _cmd_verify(args):
    cfg = args.config_obj
    out = _out_dir(args)
    if args.all:
        names = sorted(SCENARIOS)
    elif args.scenario:
        names = [args.scenario]
    elif cfg.scenario:
        names = [cfg.scenario]
    else:
        result, code = run_pipeline(cfg)
        emit_report(result, out)
        _print_result(result)
        return code
    worst = 0
    for name in names:
        result = run_scenario(name, cfg)
        emit_report(result, os.path.join(out, name) if len(names) > 1 else out)
        _print_result(result)
        worst = max(worst, 0 if result.passed else 1)
    return worst


def _print_result(result):
    status = "PASS" if result.passed else "FAIL"
    print(f"[{status}] scenario {result.name}")
    for c in result.checks:
        print(f"    {'ok ' if c.passed else 'FAIL'} {c.name} [{c.provenance}]: {c.detail}")
    for r in result.report.remainder_fits:
        slope = "at-floor" if r.slope is None else f"{r.slope:.3f}"
        expected = "-" if r.k_plus is None else f"{r.k_plus:.4g}"
        print(f"    {'ok ' if r.passed else 'FAIL'} remainder k={r.k:.4g}: "
              f"slope {slope}, expected {expected} ({r.points} pts)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="phg",
        description="Polyhomogeneous cusp expansions with a per-mode ODE oracle")
    ap.add_argument("--version", action="version", version=f"phg {__version__}")
    ap.add_argument("--config", help="TOML run configuration")
    ap.add_argument("--seed", type=int, default=None,
                    help="seed for randomized draws in scenarios")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("roots", help="indicial roots for one eigenvalue")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.set_defaults(fn=_cmd_roots)

    p = sub.add_parser("indexset", help="index monoid table as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--cutoff", type=float, required=True)
    p.set_defaults(fn=_cmd_indexset)

    p = sub.add_parser("expand", help="formal expansion to a given order")
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--order", type=float, required=True)
    p.add_argument("--output")
    p.set_defaults(fn=_cmd_expand)

    p = sub.add_parser("solve", help="Picard mode-ODE solve")
    p.add_argument("--model", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--order", type=float, default=2.0,
                   help="formal order for the default boundary data")
    p.add_argument("--grid", default="x0=0.1,xmin=1e-6,n=512")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=80)
    p.add_argument("--output")
    p.set_defaults(fn=_cmd_solve)

    p = sub.add_parser("verify", help="run scenario checks, emit reports")
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--all", action="store_true", help="run every bundled scenario")
    p.add_argument("--order", type=float, default=None)
    p.add_argument("--model")
    p.add_argument("--source")
    p.add_argument("--output")
    p.set_defaults(fn=_cmd_verify)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "verify":
            if args.config:
                cfg = config_from_toml(args.config)
            elif args.scenario or args.all:
                cfg = RunConfig(scenario=args.scenario or "trivial-cusp")
            elif args.model and args.source:
                cfg = RunConfig(model_file=args.model, source_file=args.source,
                                order=args.order if args.order is not None else 2.0)
            else:
                raise InputError("verify needs --scenario, --all, --config, "
                                 "or --model/--source")
            if args.order is not None:
                cfg = RunConfig(**{**cfg.__dict__, "order": args.order})
            if args.seed is not None:
                cfg = RunConfig(**{**cfg.__dict__, "seed": args.seed})
            args.config_obj = cfg
        return args.fn(args)
    except InputError as e:
        print(f"phg: input error: {e}", file=sys.stderr)
        return 2
    except (ConvergenceError, SolvabilityViolation, NonIntegrableForcing,
            DegenerateModelError) as e:
        print(f"phg: numerical failure: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"phg: input error: {e}", file=sys.stderr)
        return 2
    except PhgError as e:
        print(f"phg: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
