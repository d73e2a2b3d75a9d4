"""Command line: ``fsishape {mesh,solve,derive,validate} --config run.yaml``.

Exit codes
----------
0  success
1  invalid configuration or usage
2  geometry / mesh error (nesting violation, quality failure, invalid or unreadable mesh)
3  fixed point did not converge (MAX_ITER_EXCEEDED)
4  transformation left the admissible set (NONINVERTIBLE_TRANSFORM)
5  a validation check failed
6  other numerical failure (e.g. singular system)
"""
from __future__ import annotations

import argparse
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, FsiError, MeshError, ParseError, SolverError
from .io import format_value, trace_rows, write_csv, write_text, write_vtk

EXIT_OK, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_MAX_ITER, EXIT_NONINVERTIBLE, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6


def exit_code_for(exc: FsiError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MeshError, ParseError)):
        return EXIT_GEOMETRY
    if exc.code == "MAX_ITER_EXCEEDED":
        return EXIT_MAX_ITER
    if exc.code == "NONINVERTIBLE_TRANSFORM":
        return EXIT_NONINVERTIBLE
    return EXIT_NUMERIC


def _say(msg: str) -> None:
    print(msg, flush=True)


def _write_manifest(out: Path, command: str, cfg_hash: str, seed: int) -> None:
    lines = [f"command: {command}", f"config_sha256: {cfg_hash}", f"seed: {seed}",
             f"fsishape: {__version__}", f"python: {platform.python_version()}",
             f"numpy: {np.__version__}", f"scipy: {scipy.__version__}"]
    write_text(out / "manifest.txt", "\n".join(lines) + "\n")


def _build_mesh(cfg: RunConfig):
    from .mesh import generate_annular_mesh, load_mesh

    if cfg.geometry.mesh_file:
        return load_mesh(cfg.geometry.mesh_file, cfg.geometry.min_angle)
    return generate_annular_mesh(cfg.geometry_config())


def _discretization(cfg: RunConfig):
    from .fsi import Discretization

    return Discretization(_build_mesh(cfg))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_mesh(cfg: RunConfig, out: Path, args) -> int:
    from .mesh import mesh_report, save_mesh

    if args.check_only:
        if not cfg.geometry.mesh_file:
            cfg.geometry_config().check()
        _say("configuration OK")
        return EXIT_OK
    mesh = _build_mesh(cfg)
    save_mesh(mesh, out / "mesh.fsimesh")
    rep = mesh_report(mesh)
    text = "\n".join(f"{k}: {format_value(v)}" for k, v in rep.items()) + "\n"
    write_text(out / "mesh_report.txt", text)
    _say(text.rstrip())
    return EXIT_OK


def cmd_solve(cfg: RunConfig, out: Path, args) -> int:
    from .fsi import fsi_fixed_point
    from .sensitivity import eval_functional

    disc = _discretization(cfg)
    try:
        res = fsi_fixed_point(disc, cfg.problem_data(), cfg.solver_settings())
    except SolverError as exc:
        hist = exc.details.get("history", [])
        write_csv(out / "trace.csv", trace_rows(hist), ["iter", "increment_norm", "rate", "J_min"])
        last = hist[-1].increment_norm if hist else float("nan")
        _say(f"{exc.code}: {exc.args[0]} (last residual {last:.6g}, {len(hist)} iterations recorded)")
        return exit_code_for(exc)
    write_csv(out / "trace.csv", trace_rows(res.trace), ["iter", "increment_norm", "rate", "J_min"])
    write_vtk(out / "state.vtk", disc.mesh, disc, res.state)
    rows = []
    for spec in cfg.functional_specs():
        val = eval_functional(spec, disc, res.state)
        rows.append({"functional": spec.name, "value": val})
        _say(f"functional {spec.name} = {format_value(val)}")
    write_csv(out / "functionals.csv", rows, ["functional", "value"])
    _say(f"converged in {res.iterations} iterations (self-consistency {res.self_consistency:.3g})")
    return EXIT_OK


def cmd_derive(cfg: RunConfig, out: Path, args) -> int:
    from .validation import StudyPlan, random_bump_directions, run_shape_fd, shape_fd_result

    disc = _discretization(cfg)
    directions = cfg.direction_fields() or random_bump_directions(cfg.geometry_config(), 3, args.seed)
    plan_cfg = next((p for p in cfg.study_plans() if p.kind == "SHAPE_FD"), None)
    plan = plan_cfg or StudyPlan("SHAPE_FD", name="derivatives", seed=args.seed)
    try:
        reports = run_shape_fd(plan, disc, cfg.problem_data(), cfg.functional_specs(), directions,
                               cfg.solver_settings(), with_fd=args.with_fd)
    except SolverError as exc:
        _say(f"{exc.code}: {exc.args[0]}")
        return exit_code_for(exc)
    res = shape_fd_result(plan, reports)
    write_csv(out / "derivatives.csv", res.rows, res.columns)
    lines = []
    for r in sorted(reports, key=lambda r: (r.functional, r.direction)):
        line = (f"{r.functional} {r.direction}: {r.status} direct={format_value(r.derivative_direct)} "
                f"adjoint={format_value(r.derivative_adjoint)}")
        if args.with_fd:
            line += f" fd={format_value(r.fd_reference)} order={format_value(r.observed_order)}"
        lines.append(line)
    write_text(out / "derivatives.txt", "\n".join(lines) + "\n")
    _say("\n".join(lines))
    return EXIT_OK


def run_plans(cfg: RunConfig, seed: int):
    """Run every configured study; returns the list of StudyResult."""
    from .validation import (StudyResult, random_bump_directions, run_contraction_sweep, run_material_fd, run_mms,
                             run_piola_refinement, run_shape_study)

    results = []
    disc = None
    for plan in cfg.study_plans():
        plan.seed = seed
        try:
            if plan.kind in ("MMS_STOKES", "MMS_STRUCTURE"):
                results.append(run_mms(plan))
            elif plan.kind == "PIOLA_REFINE":
                results.append(run_piola_refinement(plan))
            else:
                disc = disc or _discretization(cfg)
                if plan.kind == "CONTRACTION_SWEEP":
                    results.append(run_contraction_sweep(plan, disc, cfg.problem_data(), cfg.solver_settings()))
                elif plan.kind == "SHAPE_FD":
                    results.append(run_shape_study(plan, disc, cfg.problem_data(), cfg.functional_specs(),
                                                   cfg.direction_fields(), cfg.geometry_config(),
                                                   cfg.solver_settings()))
                else:
                    dirs = cfg.direction_fields() or random_bump_directions(cfg.geometry_config(), 1, seed)
                    results.append(run_material_fd(plan, disc, cfg.problem_data(), dirs[0][1]))
        except SolverError as exc:
            results.append(StudyResult(plan.kind, plan.name, error=f"{exc.code}: {exc.args[0]}"))
    return results


def cmd_validate(cfg: RunConfig, out: Path, args) -> int:
    results = run_plans(cfg, args.seed)
    lines = []
    for r in results:
        write_csv(out / f"{r.name}.csv", r.rows, r.columns)
        status = "PASS" if r.passed else "FAIL"
        detail = r.error or "; ".join(c.describe() + ("" if c.passed else " [FAILED]") for c in r.checks)
        lines.append(f"{status} {r.name}: {detail}")
    write_text(out / "summary.txt", "".join(l + "\n" for l in lines))
    for l in lines:
        _say(l)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {"mesh": cmd_mesh, "solve": cmd_solve, "derive": cmd_derive, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsishape", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog=__doc__[__doc__.index("Exit codes"):])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (YAML)")
    p.add_argument("--out", help="output directory (overrides the config's 'output')")
    p.add_argument("--with-fd", action="store_true", help="derive: add finite-difference checks")
    p.add_argument("--check-only", action="store_true", help="mesh: validate the configuration only")
    p.add_argument("--seed", type=int, default=None, help="seed for random test directions")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, digest = load_config(args.config)
    except FsiError as exc:
        print(f"{exc.code}: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is None:
        args.seed = cfg.seed
    out = Path(args.out or cfg.output)
    try:
        if not (args.command == "mesh" and args.check_only):
            out.mkdir(parents=True, exist_ok=True)
            _write_manifest(out, args.command, digest, args.seed)
        return COMMANDS[args.command](cfg, out, args)
    except FsiError as exc:
        msg = f"{exc.code}: {exc.args[0]}"
        if exc.code == "NESTING_VIOLATION" and "constraint" in exc.details:
            msg += f" [constraint {exc.details['constraint']}]"
        print(msg, file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
