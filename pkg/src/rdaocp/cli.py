"""Command-line front end: ``rdaocp {solve,study,estimate}``.

Every flag has a matching key in the optional JSON config file (dashes
become underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from .ipdg import l2_error
from .linalg import NotSPDError
from .mesh import MeshError
from .ocp import IntegralLowerBound, PGDError, control_error, kkt_violation, objective
from .reconstruction import ReconstructionError
from .study import (HU_RULES, StudyConfig, StudyError, csv_columns,
                    run_convergence_study, run_estimator_study, solve_instance,
                    study_metadata, write_csv, write_vtk, _fmt)

log = logging.getLogger("rdaocp")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_LINALG = 4
EXIT_DISCRETIZATION = 5

THREADS_ENV = "RDAOCP_THREADS"

CONFIG_KEYS = ("example", "m", "n", "hu", "mu", "rho", "tol_u", "max_iter", "out", "vtk",
               "cap", "mean_mode", "verbose")


class ConfigError(ValueError):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty mesh list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for the flags")
    common.add_argument("--example", help="ex1 | ex2 | ex3")
    common.add_argument("--m", type=int, help="polynomial degree of the reconstruction")
    common.add_argument("--n", type=_int_list, help="state grid resolution(s), comma separated")
    common.add_argument("--hu", choices=HU_RULES, help="control mesh coupling rule")
    common.add_argument("--variational", dest="hu", action="store_const", const="variational",
                        help="same as --hu variational")
    common.add_argument("--mu", type=float, help="penalty parameter (default 3 m^2)")
    common.add_argument("--rho", type=float, help="gradient step size")
    common.add_argument("--tol-u", dest="tol_u", type=float, help="stopping tolerance on |u_{n+1} - u_n|")
    common.add_argument("--max-iter", dest="max_iter", type=int, help="iteration limit")
    common.add_argument("--mean-mode", dest="mean_mode", choices=("barycenter", "quadrature"),
                        help="how j'(u) is taken per control element")
    common.add_argument("--out", help="output CSV path (stdout if omitted)")
    common.add_argument("--vtk", help="VTK output path (solve) or file prefix (estimate)")
    common.add_argument("--cap", type=float, help="clip value for the control effectivity field")
    common.add_argument("-v", "--verbose", action="count", help="more logging (repeatable)")

    p = argparse.ArgumentParser(prog="rdaocp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one instance and print a summary")
    sub.add_parser("study", parents=[common], help="convergence study, EOC table as CSV")
    sub.add_parser("estimate", parents=[common], help="indicator and effectivity study")
    return p


def _key_line(text, key):
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return 0


def load_config(path) -> dict:
    """Read a JSON config object; unknown keys are errors."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    out = {}
    for key, value in data.items():
        norm = key.replace("-", "_")
        if norm not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{_key_line(text, key)}: unknown key {key!r}; "
                              f"allowed: {', '.join(CONFIG_KEYS)}")
        if norm == "n" and not isinstance(value, list):
            value = [value] if isinstance(value, int) else _int_list(value)
        out[norm] = (value, _key_line(text, key))
    return out


def merge(args) -> dict:
    """Config-file values overridden by explicit flags."""
    settings = {}
    lines = {}
    if args.config:
        for key, (value, line) in load_config(args.config).items():
            settings[key] = value
            lines[key] = f"{args.config}:{line}"
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
            lines[key] = f"--{key.replace('_', '-')}"
    return settings, lines


_FIELD_PATTERNS = {"n": r"resolution|\bn=|\bn\^", "hu": r"h_u rule", "example": r"example"}


def make_config(command, settings, origins) -> StudyConfig:
    kw = dict(example=settings.get("example", "ex1"), m=settings.get("m", 1),
              ns=tuple(settings.get("n", (8, 16, 32) if command != "solve" else (16,))),
              hu=settings.get("hu", "equal"))
    for key in ("mu", "rho", "tol_u", "max_iter", "cap", "mean_mode", "out", "vtk"):
        if key in settings:
            kw[key] = settings[key]
    try:
        cfg = StudyConfig(**kw)
    except (TypeError, ValueError) as exc:
        field = next((k for k in origins if re.search(_FIELD_PATTERNS.get(k, rf"\b{k}\b"), str(exc))),
                     None)
        where = f" ({origins[field]})" if field else ""
        raise ConfigError(f"invalid configuration{where}: {exc}") from None
    if command == "solve" and len(cfg.ns) != 1:
        raise ConfigError(f"solve takes a single --n, got {list(cfg.ns)}")
    return cfg


def _limit_threads(env=os.environ):
    value = env.get(THREADS_ENV)
    if not value:
        return None
    try:
        count = int(value)
        if count < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=count)


# ---- commands ------------------------------------------------------------------

def cmd_solve(cfg: StudyConfig, out=sys.stdout) -> int:
    n = cfg.ns[0]
    sol, spec, nu = solve_instance(cfg, n)
    space = sol.y.space
    ex = spec.exact
    lines = [
        f"example        {cfg.example.value}",
        f"m              {cfg.m}",
        f"n              {n}",
        f"n_u            {nu if nu is not None else 'variational'}",
        f"iterations     {sol.iterations}",
        f"converged      {sol.converged}",
        f"rho            {sol.rho:g}",
        f"|u - u_h|      {control_error(sol.u, ex.u):.5e}",
        f"|y - y_h|      {l2_error(space, sol.y, ex.y):.5e}",
        f"|p - p_h|      {l2_error(space, sol.p, ex.p):.5e}",
        f"objective      {objective(sol.y, sol.u, spec):.10e}",
        f"kkt violation  {kkt_violation(sol, spec.constraint).max():.3e}",
    ]
    if isinstance(spec.constraint, IntegralLowerBound):
        integral = sol.u.integral()
        ok = integral >= spec.constraint.gamma - 1e-10
        lines.append(f"integral of u  {integral:.5e} (>= {spec.constraint.gamma:g}: "
                     f"{'ok' if ok else 'VIOLATED'})")
    out.write("\n".join(lines) + "\n")
    if cfg.vtk:
        write_vtk(cfg.vtk, sol)
        log.info("wrote %s", cfg.vtk)
    return EXIT_OK


def _emit_csv(rows, cfg, out):
    if cfg.out:
        write_csv(rows, cfg.out, study_metadata(cfg))
        log.info("wrote %s", cfg.out)
    else:
        cols = csv_columns(type(rows[0]))
        out.write(",".join(cols) + "\n")
        for row in rows:
            out.write(",".join(_fmt(getattr(row, c)) for c in cols) + "\n")


def cmd_study(cfg: StudyConfig, out=sys.stdout) -> int:
    rows = run_convergence_study(cfg)
    _emit_csv(rows, cfg, out)
    return EXIT_OK


def cmd_estimate(cfg: StudyConfig, out=sys.stdout) -> int:
    res = run_estimator_study(cfg)
    _emit_csv(res.rows, cfg, out)
    for row, fields in zip(res.rows, res.fields):
        rep = fields["report"]
        arrays = dict(e_y=fields["e_y"], e_p=fields["e_p"], e_u=fields["e_u"],
                      eta1_y=rep.eta1_y, eta1_p=rep.eta1_p, eta2_y=rep.eta2_y,
                      eta3_y=rep.eta3_y, eta2_p=rep.eta2_p, eta3_p=rep.eta3_p,
                      eta0=rep.eta0_per_element)
        if rep.labels is not None:
            arrays["labels"] = rep.labels
        if cfg.out:
            path = Path(cfg.out)
            target = path.with_name(f"{path.stem}_fields_n{row.n}.npz")
            np.savez(target, **arrays)
            log.info("wrote %s", target)
        if cfg.vtk:
            sol = fields["solution"]
            ne = sol.y.space.mesh.n_elements
            cells = {k: v for k, v in arrays.items() if np.shape(v) == (ne,)}
            target = f"{cfg.vtk}_n{row.n}.vtk"
            write_vtk(target, sol, cells)
            log.info("wrote %s", target)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "study": cmd_study, "estimate": cmd_estimate}


def run(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        settings, origins = merge(args)
        verbose = int(settings.get("verbose") or 0)
        logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = make_config(args.command, settings, origins)
        limiter = _limit_threads()
    except (ConfigError, OSError) as exc:
        print(f"rdaocp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, out)
    except (StudyError, PGDError) as exc:
        print(f"rdaocp: not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (NotSPDError, np.linalg.LinAlgError) as exc:
        print(f"rdaocp: linear solver failure: {exc}", file=sys.stderr)
        return EXIT_LINALG
    except (ReconstructionError, MeshError) as exc:
        print(f"rdaocp: discretization error: {exc}", file=sys.stderr)
        return EXIT_DISCRETIZATION
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
