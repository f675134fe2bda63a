"""Command-line surface: solve, diagnose, converge, and perturb workflows.

Every output file is accompanied by a run manifest recording the command,
problem, parameters, and tool version; identical argument vectors produce
bit-identical data files.  Numeric output uses 17 significant digits.

Exit codes: 0 success, 1 usage or validation error, 2 numerical
non-convergence (or a converge run below the order threshold).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .grid import Grid
from .model import (
    CATALOG,
    CapabilityError,
    closed_form_solution,
    make_problem,
)
from .euler import SweepConfig, convergence_study, residuals, sweep_solve
from .pmp import SwitchingConfig, analyze_switching
from .perturb import PerturbationSpec, uniform_study
from .variation import coercivity_probe, duality_check, linearize

OUTDIR_ENV = "BANGSOLVE_OUTDIR"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _out_dir(args) -> Path:
    if args.outdir is not None:
        base = Path(args.outdir)
    elif os.environ.get(OUTDIR_ENV):
        base = Path(os.environ[OUTDIR_ENV])
    else:
        base = Path.cwd()
    base.mkdir(parents=True, exist_ok=True)
    return base


def _write_manifest(path: Path, command: str, args, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "problem": getattr(args, "problem", None),
        "parameters": {"alpha": getattr(args, "alpha", None),
                       "beta": getattr(args, "beta", None)},
        "grid": {"n": getattr(args, "n", None),
                 "n_list": getattr(args, "n_list", None)},
        "config": {
            "damping": getattr(args, "damping", None),
            "tol": getattr(args, "tol", None),
            "tol_round": getattr(args, "tol_round", None),
            "max_iterations": getattr(args, "max_iterations", None),
            "seed": getattr(args, "seed", None),
        },
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "outputs": [path.name],
    }
    if extra:
        manifest.update(extra)
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def _sweep_config(args) -> SweepConfig:
    return SweepConfig(
        damping=args.damping,
        tol_control=args.tol,
        max_iterations=args.max_iterations,
        tol_round=args.tol_round,
    )


def _build_problem(args):
    params = {}
    if args.alpha is not None:
        params["alpha"] = args.alpha
    if args.beta is not None:
        params["beta"] = args.beta
    try:
        return make_problem(args.problem, params)
    except KeyError:
        print(f"error: unknown problem {args.problem!r}", file=sys.stderr)
        print("catalog:", file=sys.stderr)
        for name, entry in sorted(CATALOG.items()):
            print(f"  {name}: {entry['doc']} (defaults {entry['parameters']})",
                  file=sys.stderr)
        raise SystemExit(1)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(1)


def _parse_n(args) -> int:
    if args.n < 1:
        print("error: N must be >= 1", file=sys.stderr)
        raise SystemExit(1)
    return args.n


def _parse_n_list(text: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        print(f"error: malformed N list {text!r}", file=sys.stderr)
        raise SystemExit(1)
    if not values or any(v < 1 for v in values) \
            or any(b <= a for a, b in zip(values, values[1:])):
        print(f"error: N list must be strictly increasing positive integers, got {text!r}",
              file=sys.stderr)
        raise SystemExit(1)
    return values


def cmd_solve(args) -> int:
    problem = _build_problem(args)
    n = _parse_n(args)
    grid = Grid(n, problem.horizon)
    result = sweep_solve(problem, grid, _sweep_config(args))
    triple = result.embed()
    sigma = triple.sigma_nodes(problem)

    out = _out_dir(args) / args.output
    nx, m = problem.state_dim, problem.control_dim
    header = (["t"] + [f"x{i}" for i in range(nx)] + [f"p{i}" for i in range(nx)]
              + [f"u{i}" for i in range(m)] + [f"sigma{i}" for i in range(m)])
    lines = [",".join(header)]
    u_nodes = np.vstack([result.u_cells, result.u_cells[-1]])  # last row repeats final cell
    for i, t in enumerate(grid.nodes):
        row = ([t] + list(result.x_nodes[i]) + list(result.p_nodes[i])
               + list(u_nodes[i]) + list(sigma[i]))
        lines.append(",".join(_fmt(v) for v in row))
    out.write_text("\n".join(lines) + "\n")
    _write_manifest(out, "solve", args, extra={
        "converged": result.converged,
        "iterations": result.iterations,
        "stationarity_residual": result.stationarity_residual,
    })
    print(f"wrote {out} ({n + 1} rows), converged={result.converged}, "
          f"iterations={result.iterations}")
    return 0 if result.converged else 2


_ALL_CHECKS = ("switching", "duality", "coercivity", "symmetry")


def cmd_diagnose(args) -> int:
    problem = _build_problem(args)
    n = _parse_n(args)
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    for c in checks:
        if c not in _ALL_CHECKS:
            print(f"error: unknown check {c!r}; available: {', '.join(_ALL_CHECKS)}",
                  file=sys.stderr)
            return 1

    grid = Grid(n, problem.horizon)
    result = sweep_solve(problem, grid, _sweep_config(args))
    triple = result.embed()
    report: dict = {"problem": problem.name, "n": n, "converged": result.converged}
    passes = []
    skipped = []

    lin = None
    if any(c in checks for c in ("duality", "coercivity", "symmetry")):
        try:
            lin = linearize(problem, triple)
        except CapabilityError as exc:
            lin = None
            for c in ("duality", "coercivity", "symmetry"):
                if c in checks:
                    report[c] = {"skipped": True, "reason": str(exc)}
                    skipped.append(c)

    if "switching" in checks:
        sw = analyze_switching(problem, triple,
                               SwitchingConfig(kappa_min=args.kappa_min,
                                               window=args.window))
        report["switching"] = [e.to_json_dict() for e in sw.edges]
        passes.append(sw.passed)

    if "duality" in checks and lin is not None:
        rng = np.random.default_rng(args.seed)
        worst = 0.0
        for _ in range(args.duality_samples):
            du = rng.uniform(-1.0, 1.0, size=(n, problem.control_dim))
            worst = max(worst, duality_check(lin, du).gap)
        ok = worst <= args.duality_tol
        report["duality"] = {"max_gap": worst, "samples": args.duality_samples,
                             "tolerance": args.duality_tol, "pass": ok}
        passes.append(ok)

    if "coercivity" in checks and lin is not None:
        probe = coercivity_probe(lin, problem.control_set, c0=args.c0,
                                 alpha0=args.alpha0, sample_count=args.samples,
                                 seed=args.seed, gamma0=args.gamma0)
        report["coercivity"] = probe.to_json_dict()
        passes.append(probe.passed)

    if "symmetry" in checks and lin is not None:
        ok = lin.symmetry_defect <= args.tol_sym
        report["symmetry"] = {"defect": lin.symmetry_defect,
                              "tolerance": args.tol_sym, "pass": ok}
        passes.append(ok)

    report["pass"] = bool(all(passes)) if passes else True
    if skipped:
        report["warning"] = f"skipped checks (missing capabilities): {', '.join(skipped)}"
        print(f"warning: skipped {', '.join(skipped)}", file=sys.stderr)

    out = _out_dir(args) / args.output
    out.write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out, "diagnose", args)
    print(f"wrote {out}; pass={report['pass']}")
    return 0


def cmd_converge(args) -> int:
    problem = _build_problem(args)
    n_list = _parse_n_list(args.n_list)
    oracle = closed_form_solution(args.problem, {"alpha": args.alpha, "beta": args.beta}
                                  if args.alpha is not None or args.beta is not None
                                  else None)
    if oracle is None:
        print(f"error: problem {args.problem!r} has no closed-form oracle", file=sys.stderr)
        return 1
    table = convergence_study(problem, oracle, n_list, _sweep_config(args))

    out = _out_dir(args) / args.output
    out.write_text(table.to_csv_text())
    _write_manifest(out, "converge", args, extra={"order": table.order,
                                                  "constant_C": table.constant})
    if table.order is None:
        print(f"wrote {out}; order undefined (single usable row)")
        print("warning: cannot fit an order from one point", file=sys.stderr)
        return 0
    print(f"wrote {out}; fitted order = {_fmt(table.order)} (threshold {args.min_order})")
    return 0 if table.order >= args.min_order else 2


def cmd_perturb(args) -> int:
    problem = _build_problem(args)
    n_list = _parse_n_list(args.n_list)
    oracle = closed_form_solution(args.problem, {"alpha": args.alpha, "beta": args.beta}
                                  if args.alpha is not None or args.beta is not None
                                  else None)
    if oracle is None:
        print(f"error: problem {args.problem!r} has no closed-form oracle", file=sys.stderr)
        return 1
    spec = PerturbationSpec(rho=args.rho, seed=args.seed, count=args.count)
    report = uniform_study(problem, oracle, spec, n_list, _sweep_config(args))

    out = _out_dir(args) / args.output
    out.write_text(report.to_json() + "\n")
    _write_manifest(out, "perturb", args, extra={"failed_members": report.failed_members})
    print(f"wrote {out}; members={args.count}, failed={len(report.failed_members)}, "
          f"C spread={report.c_spread}")
    return 0 if not report.failed_members else 2


def _add_problem_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--problem", default="example1", help="catalog problem name")
    p.add_argument("--alpha", type=float, default=None, help="example1 parameter alpha")
    p.add_argument("--beta", type=float, default=None, help="example1 parameter beta")


def _add_sweep_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--damping", "-l", type=float, default=0.5,
                   help="initial minimizer-update damping in (0, 1]")
    p.add_argument("--tol", type=float, default=1e-9, help="L1 stopping tolerance")
    p.add_argument("--tol-round", type=float, default=1e-7,
                   help="vertex margin for the final bang-bang projection")
    p.add_argument("--max-iterations", type=int, default=300)


def _add_out_args(p: argparse.ArgumentParser, default_name: str) -> None:
    p.add_argument("--outdir", default=None,
                   help=f"output directory (default: ${OUTDIR_ENV} or cwd)")
    p.add_argument("--output", default=default_name, help="output file name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bangsolve",
        description="Euler discretization of bang-bang optimal control problems "
                    "with switching, duality, and coercivity diagnostics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="forward-backward sweep at one grid size")
    _add_problem_args(p)
    p.add_argument("--n", type=int, required=True, help="number of Euler steps")
    _add_sweep_args(p)
    _add_out_args(p, "solution.csv")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("diagnose", help="switching/duality/coercivity/symmetry checks")
    _add_problem_args(p)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--checks", default=",".join(_ALL_CHECKS),
                   help="comma-separated subset of: " + ", ".join(_ALL_CHECKS))
    p.add_argument("--kappa-min", type=float, default=1e-6)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--c0", type=float, default=0.5)
    p.add_argument("--alpha0", type=float, default=1.0)
    p.add_argument("--gamma0", type=float, default=0.1)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--duality-samples", type=int, default=5)
    p.add_argument("--duality-tol", type=float, default=1e-6)
    p.add_argument("--tol-sym", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    _add_sweep_args(p)
    _add_out_args(p, "diagnose.json")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("converge", help="convergence table against the closed-form oracle")
    _add_problem_args(p)
    p.add_argument("--n-list", default="32,64,128,256,512,1024")
    p.add_argument("--min-order", type=float, default=0.9)
    _add_sweep_args(p)
    _add_out_args(p, "convergence.csv")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("perturb", help="uniform convergence study over a perturbed family")
    _add_problem_args(p)
    p.add_argument("--n-list", default="64,128,256,512")
    p.add_argument("--rho", type=float, default=1e-2, help="W^{1,inf} perturbation budget")
    p.add_argument("--count", type=int, default=20, help="family size")
    p.add_argument("--seed", type=int, default=0)
    _add_sweep_args(p)
    _add_out_args(p, "family.json")
    p.set_defaults(func=cmd_perturb)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
