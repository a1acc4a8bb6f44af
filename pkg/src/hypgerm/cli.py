"""Command-line front end.

Every command accepts the same flat flags; ``--config FILE`` supplies
defaults from a JSON object with the same keys (dashes or underscores),
and explicit flags override it.  Exit status is 0 on success, 2 when a
computed residual exceeds its tolerance and 1 on operational errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional, Sequence

import numpy as np

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_VALIDATION = 2

COMMANDS = ("germ-solve", "flow", "phase", "curvature", "holonomy", "spectrum",
            "symplectic", "report", "validate")
CSV_COMMANDS = ("flow", "phase", "spectrum")


class CliError(Exception):
    """Operational failure with a user-facing message."""


class ValidationFailure(Exception):
    """A residual exceeded its tolerance; carries the artifact to emit."""

    def __init__(self, message: str, payload=None):
        super().__init__(message)
        self.payload = payload


# ---------------------------------------------------------------------------
# Argument parsing

def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"expected a positive value, got {text}")
        return value
    return parse


def _nonnegative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypgerm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("path", nargs="?", help="germ file for 'validate'")
    parser.add_argument("--config", help="JSON file with default values for the flags")
    parser.add_argument("--mesh", choices=("bolza", "disk"), default="bolza")
    parser.add_argument("--refine", type=_nonnegative_int, default=1)
    parser.add_argument("--tol", type=_positive(float), default=None,
                        help="command tolerance (solver tolerance for germ-solve)")
    parser.add_argument("--tmax", type=float, default=10.0)
    parser.add_argument("--dt", type=_positive(float), default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="output file (stdout when omitted)")
    parser.add_argument("--format", choices=("json", "csv"), default=None)
    parser.add_argument("--x0", type=float, default=0.0)
    parser.add_argument("--y0", type=float, default=0.0)
    parser.add_argument("--qd-seed", type=int, default=7)
    parser.add_argument("--amp", type=float, default=0.1)
    parser.add_argument("--op", choices=("jacobi", "laplacian", "connection", "codazzi"), default="jacobi")
    parser.add_argument("--germ", default=None, help="germ JSON file or 'fuchsian'")
    parser.add_argument("--vertex", type=_nonnegative_int, default=0)
    parser.add_argument("--k", type=_positive(int), default=8, help="number of eigenvalues")
    parser.add_argument("--samples", type=_positive(int), default=10)
    return parser


def _config_defaults(parser: argparse.ArgumentParser, path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config '{path}': {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed config '{path}': {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise CliError(f"malformed config '{path}': expected a JSON object")
    known = {a.dest: a for a in parser._actions}
    out = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("help", "config") or dest not in known:
            raise CliError(f"malformed config '{path}': unknown key '{key}'")
        action = known[dest]
        if value is not None and action.type is not None and not isinstance(value, bool):
            try:
                value = action.type(str(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"malformed config '{path}': bad value for '{key}': {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise CliError(f"malformed config '{path}': '{key}' must be one of {list(action.choices)}")
        out[dest] = value
    return out


def parse_config(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags, applying ``--config`` defaults first so flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        parser.set_defaults(**_config_defaults(parser, known.config))
    args = parser.parse_args(argv)
    if args.format is None:
        args.format = "csv" if args.command in ("flow", "phase", "spectrum") else "json"
    if args.format == "csv" and args.command not in CSV_COMMANDS:
        raise CliError(f"command '{args.command}' has no CSV output")
    if args.command == "validate" and not args.path:
        raise CliError("validate needs a germ file path")
    return args


# ---------------------------------------------------------------------------
# Helpers

def _load_germ(args):
    from .germ import fuchsian_germ, germ_from_dict
    if args.germ in (None, "fuchsian"):
        if args.mesh != "bolza":
            raise CliError("the Fuchsian germ needs the closed mesh; pass --germ FILE for disk germs")
        return fuchsian_germ(args.refine)
    return germ_from_dict(_read_document(args.germ))


def _read_document(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read '{path}': {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"'{path}' is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise CliError(f"'{path}' must hold a JSON object")
    return data


def _emit(args, payload, header=None) -> None:
    from .io import dumps_json, format_float
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in payload:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
        text = buf.getvalue()
    else:
        text = dumps_json(payload) + "\n"
    if args.out:
        try:
            with open(args.out, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise CliError(f"cannot write '{args.out}': {exc.strerror}") from exc
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands

def cmd_germ_solve(args):
    from .germ import disk_germ, fuchsian_germ, solve_germ
    tol = 1e-12 if args.tol is None else args.tol
    if args.mesh == "disk":
        germ = disk_germ(amp=args.amp, tol=max(tol, 1e-10))
    elif args.amp == 0.0:
        germ = fuchsian_germ(args.refine)
    else:
        germ = solve_germ(args.refine, seed=args.qd_seed, amp=args.amp, tol=tol)
    doc = germ.to_dict()
    if not germ.accepted:
        raise ValidationFailure(f"germ residuals {germ.residuals} exceed tolerances", doc)
    return doc, None


def cmd_flow(args):
    from .flow import TRAJECTORY_HEADER, flow_point, traceless_decay, trajectory_rows
    germ = _load_germ(args)
    if args.vertex >= germ.mesh.n_classes:
        raise CliError(f"--vertex must be below {germ.mesh.n_classes}")
    traj = flow_point(np.eye(2), germ.m[args.vertex], args.tmax, args.dt)
    rows = list(trajectory_rows(traj))
    if args.format == "csv":
        payload, header = rows, TRAJECTORY_HEADER
    else:
        payload = {"vertex": args.vertex, "t_end": float(traj.t[-1]), "steps": len(rows) - 1,
                   "final": dict(zip(TRAJECTORY_HEADER, rows[-1])),
                   "decay_rate": traceless_decay(traj), "blowup": bool(traj.blowup)}
        header = None
    if traj.blowup:
        raise ValidationFailure(f"flow left the trapping region (blow-up at {traj.blowup})", (payload, header))
    return payload, header


def cmd_phase(args):
    from .flow import phase_trajectory, trapping_check
    try:
        path = phase_trajectory(args.x0, args.y0, args.tmax, args.dt)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    trapped, margin, resid = trapping_check(path)
    if args.format == "csv":
        payload, header = [tuple(float(v) for v in row) for row in path], ["t", "x", "y"]
    else:
        payload = {"t": path[:, 0], "x": path[:, 1], "y": path[:, 2], "trapped": trapped,
                   "margin": margin, "identity_residual": resid}
        header = None
    start_inside = args.x0 >= 0 and 0.5 * args.x0**2 <= args.y0 <= 1.0 / 3.0
    if start_inside and not trapped:
        raise ValidationFailure(f"trajectory left the trapping region (margin {margin})", (payload, header))
    return payload, header


def cmd_curvature(args):
    from .connection import build_connection, codazzi_block, curvature_norm, gauss_block
    germ = _load_germ(args)
    conn = build_connection(germ)
    tol = 1e-4 if args.tol is None else args.tol
    doc = {"curvature_norm": curvature_norm(conn),
           "gauss_block_max": float(np.abs(gauss_block(conn)).max()),
           "codazzi_block_max": float(np.abs(codazzi_block(conn)).max()),
           "germ_residuals": germ.residuals, "refinement": germ.mesh.refinement_level,
           "tolerance": tol}
    if doc["curvature_norm"] > tol:
        raise ValidationFailure(f"curvature {doc['curvature_norm']:.3g} exceeds {tol:g}", doc)
    return doc, None


def cmd_holonomy(args):
    from .connection import build_connection, holonomy_report
    germ = _load_germ(args)
    doc = holonomy_report(build_connection(germ))
    tol = 1e-6 if args.tol is None else args.tol
    bad = [r for r in doc["so3c_residuals"] if r["orthogonality"] > tol * r["loop_length"]]
    if bad:
        raise ValidationFailure("holonomy leaves SO(3,C) beyond tolerance", doc)
    return doc, None


def cmd_spectrum(args):
    from .linearization import SPECTRUM_HEADER, jacobi_kernel, spectrum_rows
    germ = _load_germ(args)
    try:
        rows = spectrum_rows(germ, args.op, args.k)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if args.format == "csv":
        return rows, SPECTRUM_HEADER
    doc = {"rows": [dict(zip(SPECTRUM_HEADER, r)) for r in rows]}
    if args.op == "jacobi":
        doc["kernel"] = jacobi_kernel(germ, max(args.k, 8))
    return doc, None


def cmd_symplectic(args):
    from .symplectic import TangentProjectionError, agreement_check, moment_residuals, stokes_degeneracy
    germ = _load_germ(args)
    try:
        doc = agreement_check(germ, sample_count=args.samples)
    except TangentProjectionError as exc:
        raise CliError(str(exc)) from exc
    doc["stokes_degeneracy"] = stokes_degeneracy(germ, seed=args.seed)
    doc["moment_residuals"] = list(moment_residuals(germ, seed=args.seed))
    tol = 1e-2 if args.tol is None else args.tol
    if doc["max_rel_discrepancy"] > tol:
        raise ValidationFailure(f"pairing discrepancy {doc['max_rel_discrepancy']:.3g} exceeds {tol:g}", doc)
    return doc, None


def cmd_report(args):
    from .connection import build_connection, holonomy_report
    from .linearization import jacobi_kernel, jacobi_spectrum
    germ = _load_germ(args)
    doc = {"residuals": germ.residuals,
           "tolerances": {"trace": germ.tol_trace, "codazzi": germ.tol_codazzi, "gauss": germ.tol_gauss},
           "accepted": germ.accepted, "max_m_squared": float(germ.m_norm_squared.max()),
           "refinement": germ.mesh.refinement_level, "provenance": germ.provenance}
    if germ.mesh.is_closed:
        hol = holonomy_report(build_connection(germ))
        doc["holonomy"] = {k: hol[k] for k in ("relator_deviation", "irreducibility_margin", "curvature_norm")}
        doc["jacobi_smallest"] = float(jacobi_spectrum(germ, 2)[0])
        doc["jacobi_kernel"] = jacobi_kernel(germ)
    if not germ.accepted:
        raise ValidationFailure("germ residuals exceed tolerances", doc)
    return doc, None


def validate(path: str) -> dict:
    """Re-evaluate the residuals of a germ file against its stored tolerances."""
    from .germ import germ_from_dict, residual_summary
    from .surface import SurfaceError
    data = _read_document(path)
    try:
        germ = germ_from_dict(data)
    except (SurfaceError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"schema error in '{path}': {exc}") from exc
    fresh = residual_summary(germ.g, germ.m)
    tol = {"trace": germ.tol_trace, "codazzi": germ.tol_codazzi, "gauss": germ.tol_gauss}
    table = [{"residual": k, "value": fresh[k], "tolerance": tol[k], "pass": fresh[k] <= tol[k]}
             for k in ("trace", "codazzi", "gauss")]
    return {"path": path, "checks": table, "pass": all(r["pass"] for r in table)}


def cmd_validate(args):
    report = validate(args.path)
    for r in report["checks"]:
        status = "PASS" if r["pass"] else "FAIL"
        print(f"{r['residual']:8s} {r['value']:.6e} <= {r['tolerance']:.1e}  {status}", file=sys.stderr)
    if not report["pass"]:
        raise ValidationFailure("germ residuals exceed stored tolerances", report)
    return report, None


HANDLERS = {
    "germ-solve": cmd_germ_solve, "flow": cmd_flow, "phase": cmd_phase,
    "curvature": cmd_curvature, "holonomy": cmd_holonomy, "spectrum": cmd_spectrum,
    "symplectic": cmd_symplectic, "report": cmd_report, "validate": cmd_validate,
}


def run(args: argparse.Namespace) -> int:
    """Execute a parsed configuration and return the exit status."""
    try:
        payload, header = HANDLERS[args.command](args)
        _emit(args, payload, header)
        return EXIT_OK
    except ValidationFailure as fail:
        if fail.payload is not None:
            payload, header = fail.payload if isinstance(fail.payload, tuple) else (fail.payload, None)
            _emit(args, payload, header)
        print(f"hypgerm: validation failed: {fail}", file=sys.stderr)
        return EXIT_VALIDATION
    except CliError as exc:
        print(f"hypgerm: error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_config(argv)
    except CliError as exc:
        print(f"hypgerm: error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL
    except SystemExit as exc:  # argparse usage errors exit with status 2
        return EXIT_OPERATIONAL if exc.code else EXIT_OK
    try:
        return run(args)
    except Exception as exc:  # surface library failures as operational errors
        print(f"hypgerm: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
