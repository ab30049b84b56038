"""Command-line harness: ``calib-lab {verify,area,flux,minimize}``.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or configuration error.
Reports are JSON, tables CSV; every report embeds the full run configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CalibrationField,
    Tolerances,
    geodesic_disk_area,
    threads_from_env,
    verify_conditions,
)
from .errors import CalibLabError
from .minimizer import MinimizeOptions, minimize_area, verify_bound
from .submanifold import (
    CHARTS,
    divergence_theorem_check,
    geodesic_disk_mesh,
    graph_perturbation,
    random_rotation,
    riemannian_area,
    twist_boundary,
)
from .warp_geometry import WarpProfile, load_profile_table, make_profile

log = logging.getLogger("calib_lab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _report_failure(what: str) -> None:
    print(f"FAIL: {what}", file=sys.stderr)


def parse_profile(spec: str) -> WarpProfile:
    if spec.startswith("table:"):
        path = spec[len("table:"):]
        if not Path(path).is_file():
            raise ConfigError(f"profile table {path!r} not found")
        return load_profile_table(path)
    return make_profile(spec)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _mesh_field(args) -> CalibrationField:
    if args.profile not in CHARTS:
        raise ConfigError(f"mesh commands support --profile {' or '.join(sorted(CHARTS))} only")
    return CalibrationField(make_profile(args.profile), 2, args.rho0)


# --- commands ----------------------------------------------------------------

def cmd_verify(args) -> int:
    profile = parse_profile(args.profile)
    field = CalibrationField(profile, args.k, args.rho0)
    if not 0 < args.r_min < args.rho0:
        raise ConfigError("--r-min must lie in (0, rho0)")
    if args.grid < 2 or args.frames < 1:
        raise ConfigError("--grid must be >= 2 and --frames >= 1")
    grid = np.geomspace(args.r_min, args.rho0, args.grid)
    tol = Tolerances(args.tol_boundary, args.tol_asymptotic, args.tol_divergence)
    dim = args.dim if args.dim is not None else max(3, args.k + 1)
    report = verify_conditions(field, grid, args.frames, tol, seed=args.seed, dim=dim)
    payload = {"version": __version__, "config": _config(args), **report.to_dict(),
               "pass": bool(report.passed)}
    _write(_dump(payload), args.out)
    for i in (1, 2, 3):
        c = payload[f"condition_{i}"]
        log.info("condition %d: residual %.3g (tol %.3g) %s", i, c["residual"], c["tolerance"],
                 "pass" if c["pass"] else "FAIL")
        if not c["pass"]:
            _report_failure(f"condition {i} residual {c['residual']:.3g} exceeds {c['tolerance']:.3g}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_area(args) -> int:
    profiles = [parse_profile(p) for p in args.profile.split(",")]
    if not args.k or not args.rho0 or min(args.k) < 1 or min(args.rho0) <= 0:
        raise ConfigError("area grid needs k >= 1 and rho0 > 0")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["profile", "k", "rho0", "omega"])
    for prof in profiles:
        for k in args.k:
            for rho0 in args.rho0:
                w.writerow([prof.label, k, repr(rho0), repr(geodesic_disk_area(prof, k, rho0))])
    _write(buf.getvalue(), args.out)
    return EXIT_OK


def _build_mesh(args, seed: int):
    tilt = random_rotation(args.tilt_seed) if args.tilt_seed is not None else None
    mesh = geodesic_disk_mesh(args.rho0, args.depth, tilt, metric=args.profile)
    if getattr(args, "twist", 0.0):
        mesh = twist_boundary(mesh, args.twist, 2, seed)
    if args.perturb:
        mesh = graph_perturbation(mesh, args.perturb, args.mode if args.mode is not None else seed % 4,
                                  seed)
    return mesh


def cmd_flux(args) -> int:
    field = _mesh_field(args)
    if len(args.epsilon_ladder) < 2:
        raise ConfigError("--epsilon-ladder needs at least two radii")
    mesh = _build_mesh(args, args.seed)
    omega = geodesic_disk_area(field.profile, 2, args.rho0)
    res = divergence_theorem_check(mesh, field, args.epsilon_ladder)
    checks = {
        "outer_flux": abs(res.outer_flux) < args.tol_outer,
        "inner_flux": abs(res.extrapolated_inner_flux - omega) <= args.tol_flux * omega,
        "residual": res.relative_residual < args.tol_residual,
    }
    payload = {"version": __version__, "config": _config(args), "omega": omega,
               "area": riemannian_area(mesh), **res.to_dict(), "checks": checks,
               "pass": all(checks.values())}
    _write(_dump(payload), args.out)
    for name, ok in checks.items():
        if not ok:
            _report_failure(f"flux check {name}")
    return EXIT_OK if payload["pass"] else EXIT_FAIL


def _minimize_one(args, field, seed):
    mesh = _build_mesh(args, seed)
    opts = MinimizeOptions(max_iterations=args.max_iter, boundary=args.boundary)
    trace = minimize_area(mesh, opts)
    bound = verify_bound(trace, field, slack=args.tol_slack, flux_tolerance=args.tol_flux)
    return seed, mesh, trace, bound


def cmd_minimize(args) -> int:
    field = _mesh_field(args)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [args.seed + i for i in range(args.seeds)]
    workers = min(threads_from_env(), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(lambda s: _minimize_one(args, field, s), seeds))
    else:
        runs = [_minimize_one(args, field, s) for s in seeds]

    out = Path(args.out) if args.out else None
    results = []
    for seed, mesh, trace, bound in runs:
        entry = {"seed": seed, "initial_area": riemannian_area(mesh), "converged": trace.converged,
                 "iterations": trace.iterations[-1], "message": trace.message, **bound.to_dict()}
        if out is not None:
            stem = out.with_suffix("")
            out.parent.mkdir(parents=True, exist_ok=True)
            trace.write_csv(f"{stem}_seed{seed}_trace.csv")
            trace.mesh.save(f"{stem}_seed{seed}_mesh.json")
        entry["pass"] = bool(bound.passed and trace.converged)
        results.append(entry)
        log.info("seed %d: area %.6f omega %.6f gap %.3g%% %s", seed, bound.final_area, bound.omega,
                 100 * bound.gap / bound.omega, "pass" if entry["pass"] else "FAIL")
        if not entry["pass"]:
            failed = [k for k in ("converged", "area_ok", "flux_ok") if not entry[k]]
            _report_failure(f"seed {seed}: {', '.join(failed)}")
    payload = {"version": __version__, "config": _config(args), "runs": results,
               "pass": all(r["pass"] for r in results)}
    _write(_dump(payload), args.out)
    return EXIT_OK if payload["pass"] else EXIT_FAIL


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calib-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, profile_default="hyperbolic"):
        p.add_argument("--profile", default=profile_default,
                       help="euclidean | hyperbolic | spherical | table:PATH")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output path (stdout when omitted)")

    p = sub.add_parser("verify", help="check the three calibration conditions")
    common(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--rho0", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=200, help="number of geometric grid radii")
    p.add_argument("--r-min", type=float, default=1e-3)
    p.add_argument("--frames", type=int, default=10_000)
    p.add_argument("--dim", type=int, default=None,
                   help="ambient dimension n for random frames (default max(3, k + 1))")
    p.add_argument("--tol-boundary", type=float, default=1e-9)
    p.add_argument("--tol-asymptotic", type=float, default=1e-3)
    p.add_argument("--tol-divergence", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("area", help="tabulate geodesic disk areas as CSV")
    common(p)
    p.add_argument("--k", type=_int_list, default=[2], help="comma-separated k values")
    p.add_argument("--rho0", type=_float_list, default=[1.0], help="comma-separated radii")
    p.set_defaults(func=cmd_area)

    def mesh_args(p, depth, perturb):
        p.add_argument("--rho0", type=float, default=1.0)
        p.add_argument("--depth", type=int, default=depth)
        p.add_argument("--perturb", type=float, default=perturb)
        p.add_argument("--mode", type=int, default=None, help="bump mode (default: seed mod 4)")
        p.add_argument("--twist", type=float, default=0.0, help="boundary twist amplitude")
        p.add_argument("--tilt-seed", type=int, default=None)
        p.add_argument("--tol-flux", type=float, default=0.005)

    p = sub.add_parser("flux", help="divergence-theorem check on a disk mesh")
    common(p)
    mesh_args(p, 6, 0.0)
    p.add_argument("--epsilon-ladder", type=_float_list, default=[1e-2, 5e-3, 2.5e-3])
    p.add_argument("--tol-residual", type=float, default=0.01)
    p.add_argument("--tol-outer", type=float, default=1e-12)
    p.set_defaults(func=cmd_flux)

    p = sub.add_parser("minimize", help="minimize area from perturbed disks and check the bound")
    common(p)
    mesh_args(p, 5, 0.1)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--boundary", choices=("fixed", "slide"), default="fixed")
    p.add_argument("--tol-slack", type=float, default=0.005)
    p.set_defaults(func=cmd_minimize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CalibLabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
