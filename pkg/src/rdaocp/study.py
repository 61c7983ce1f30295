"""Convergence and estimator studies on the built-in examples.

Mesh sizes follow the grid spacing ``h = 1/n``.  The control mesh is
coupled to it by a rule: ``equal`` (``h_u = h``), ``quad``
(``h_u = 4 h^2``), ``cubic`` (``h_u = 16 h^3``) or ``variational`` (no
control mesh).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .estimators import effectivity, indicators, zz_recover
from .ipdg import EllipticSolver, RDASpace, dg_norm, l2_error
from .mesh import build_uniform
from .ocp import (OcpSolution, PGDError, control_error, pgd_solve, variational_pgd_solve)
from .problems import DEFAULT_RHO, ExampleId, make_example

log = logging.getLogger(__name__)

HU_RULES = ("equal", "quad", "cubic", "variational")


class StudyError(RuntimeError):
    pass


def control_resolution(n: int, rule: str) -> Optional[int]:
    """Control grid resolution ``n_u`` for state resolution ``n``."""
    if rule == "equal":
        return n
    if rule == "variational":
        return None
    if rule == "quad":
        num, den = n * n, 4
    elif rule == "cubic":
        num, den = n ** 3, 16
    else:
        raise ValueError(f"unknown h_u rule {rule!r}; expected one of {', '.join(HU_RULES)}")
    if num % den:
        raise ValueError(f"h_u rule {rule!r} needs n^{2 if rule == 'quad' else 3} divisible "
                         f"by {den}; n={n} gives no integer control resolution")
    nu = num // den
    if nu % n and n % nu:
        raise ValueError(f"control resolution {nu} is not nested with state resolution {n}")
    return nu


@dataclass
class StudyConfig:
    example: ExampleId = ExampleId.EX1
    m: int = 1
    ns: tuple = (8, 16, 32)
    hu: str = "equal"
    mu: Optional[float] = None
    rho: Optional[float] = None
    tol_u: float = 1e-10
    max_iter: int = 500
    cap: float = 2.0
    mean_mode: str = "barycenter"
    out: Optional[str] = None
    vtk: Optional[str] = None

    def __post_init__(self):
        self.example = ExampleId.parse(self.example)
        self.ns = tuple(int(n) for n in self.ns)
        self.validate()

    def validate(self):
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m!r}")
        if not self.ns:
            raise ValueError("at least one mesh resolution is required")
        if any(n < 1 for n in self.ns):
            raise ValueError(f"mesh resolutions must be positive, got {list(self.ns)}")
        if self.hu not in HU_RULES:
            raise ValueError(f"unknown h_u rule {self.hu!r}; expected one of {', '.join(HU_RULES)}")
        for n in self.ns:
            control_resolution(n, self.hu)
        if self.mu is not None and not self.mu > 0:
            raise ValueError(f"penalty mu must be positive, got {self.mu}")
        if self.rho is not None and not self.rho > 0:
            raise ValueError(f"step size rho must be positive, got {self.rho}")
        if not self.tol_u > 0:
            raise ValueError(f"tol_u must be positive, got {self.tol_u}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.cap > 0:
            raise ValueError(f"cap must be positive, got {self.cap}")
        if self.mean_mode not in ("barycenter", "quadrature"):
            raise ValueError(f"mean_mode must be 'barycenter' or 'quadrature', got {self.mean_mode!r}")

    @property
    def step(self) -> float:
        return self.rho if self.rho is not None else DEFAULT_RHO[self.example]


ERROR_COLUMNS = ("err_u", "err_y", "err_p", "dg_y", "dg_p", "err_rec")


@dataclass
class StudyRow:
    n: int
    n_u: int
    h: float
    h_u: float
    err_u: float
    err_y: float
    err_p: float
    dg_y: float
    dg_p: float
    err_rec: float
    eoc_u: float = math.nan
    eoc_y: float = math.nan
    eoc_p: float = math.nan
    eoc_dg_y: float = math.nan
    eoc_dg_p: float = math.nan
    eoc_rec: float = math.nan
    iterations: int = 0
    wall_time: float = field(default=0.0, compare=False)


# wall time varies between runs; it stays out of the CSV so output is reproducible
CSV_EXCLUDE = ("wall_time",)


def eoc(e_prev, e, h_prev, h):
    if not (e_prev > 0 and e > 0) or h_prev == h:
        return math.nan
    return math.log(e_prev / e) / math.log(h_prev / h)


def solve_instance(cfg: StudyConfig, n: int):
    """Solve one example on resolution ``n``; returns ``(solution, spec, n_u)``."""
    spec = make_example(cfg.example)
    mesh = build_uniform(n)
    space = RDASpace(mesh, cfg.m, mu=cfg.mu)
    solver = EllipticSolver(space, spec.coeffs)
    nu = control_resolution(n, cfg.hu)
    if nu is None:
        sol = variational_pgd_solve(spec, space, rho=cfg.step, tol=cfg.tol_u,
                                    max_iter=cfg.max_iter, solver=solver,
                                    record_objective=False)
    else:
        cmesh = mesh if nu == n else build_uniform(nu)
        sol = pgd_solve(spec, space, cmesh, rho=cfg.step, tol_u=cfg.tol_u,
                        max_iter=cfg.max_iter, solver=solver, record_objective=False,
                        mean_mode=cfg.mean_mode)
    if not sol.converged:
        raise StudyError(f"projected gradient descent did not converge for h=1/{n} "
                         f"within {cfg.max_iter} iterations (last update "
                         f"{sol.update_norms[-1]:.3e}, tol {cfg.tol_u:.1e})")
    return sol, spec, nu


def _fill_eoc(rows):
    pairs = [("eoc_u", "err_u"), ("eoc_y", "err_y"), ("eoc_p", "err_p"),
             ("eoc_dg_y", "dg_y"), ("eoc_dg_p", "dg_p"), ("eoc_rec", "err_rec")]
    for prev, row in zip(rows, rows[1:]):
        for target, src in pairs:
            setattr(row, target, eoc(getattr(prev, src), getattr(row, src), prev.h, row.h))


def run_convergence_study(cfg: StudyConfig) -> list:
    """One row of errors per mesh, with experimental orders between rows."""
    rows = []
    for n in cfg.ns:
        t0 = time.perf_counter()
        try:
            sol, spec, nu = solve_instance(cfg, n)
        except PGDError as exc:
            raise StudyError(f"h=1/{n}: {exc}") from exc
        ex = spec.exact
        space = sol.y.space
        err_rec = math.nan
        if cfg.hu == "equal":
            err_rec = zz_recover(sol.u).l2_error(ex.u)
        row = StudyRow(
            n=n, n_u=nu if nu is not None else 0, h=1.0 / n,
            h_u=1.0 / nu if nu is not None else 0.0,
            err_u=control_error(sol.u, ex.u),
            err_y=l2_error(space, sol.y, ex.y),
            err_p=l2_error(space, sol.p, ex.p),
            dg_y=dg_norm(space, sol.y, ex.y, ex.grad_y, variant="triple"),
            dg_p=dg_norm(space, sol.p, ex.p, ex.grad_p, variant="triple"),
            err_rec=err_rec, iterations=sol.iterations,
            wall_time=time.perf_counter() - t0)
        log.info("n=%d n_u=%s err_u=%.3e err_y=%.3e err_p=%.3e (%d iterations, %.1fs)",
                 n, nu, row.err_u, row.err_y, row.err_p, row.iterations, row.wall_time)
        rows.append(row)
    _fill_eoc(rows)
    return rows


@dataclass
class EstimatorRow:
    n: int
    h: float
    max_e_y: float
    min_e_y: float
    max_e_p: float
    min_e_p: float
    eta_y: float
    eta_p: float
    eta0: float
    eta0_sharp: float
    err_u: float
    err_y: float
    err_p: float


@dataclass
class EstimatorResult:
    rows: list
    fields: list = field(repr=False)    # per mesh: dict of indicator fields


def run_estimator_study(cfg: StudyConfig) -> EstimatorResult:
    """Effectivity ratios and indicator fields on each mesh.

    The control ratio is clipped at ``cfg.cap`` in the returned fields.
    """
    if cfg.hu == "variational":
        raise ValueError("indicators need a piecewise-constant control; use an h_u rule "
                         "other than 'variational'")
    rows, fields = [], []
    for n in cfg.ns:
        try:
            sol, spec, nu = solve_instance(cfg, n)
        except PGDError as exc:
            raise StudyError(f"h=1/{n}: {exc}") from exc
        rep = indicators(sol, spec)
        eff = effectivity(rep, sol, spec)
        space = sol.y.space
        ex = spec.exact
        rows.append(EstimatorRow(
            n=n, h=1.0 / n,
            max_e_y=float(eff.e_y.max()), min_e_y=float(eff.e_y.min()),
            max_e_p=float(eff.e_p.max()), min_e_p=float(eff.e_p.min()),
            eta_y=rep.total_y, eta_p=rep.total_p, eta0=rep.eta0,
            eta0_sharp=rep.eta0_sharp if rep.eta0_sharp is not None else math.nan,
            err_u=control_error(sol.u, ex.u), err_y=l2_error(space, sol.y, ex.y),
            err_p=l2_error(space, sol.p, ex.p)))
        fields.append(dict(solution=sol, report=rep, e_y=eff.e_y, e_p=eff.e_p,
                           e_u=np.minimum(eff.e_u, cfg.cap), labels=rep.labels))
    return EstimatorResult(rows, fields)


# ---- output ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.5e" % v


def csv_columns(row_type) -> list:
    return [f.name for f in dataclasses.fields(row_type) if f.name not in CSV_EXCLUDE]


def write_csv(rows, path, metadata: dict | None = None) -> None:
    """Write rows as CSV; floats in scientific notation with 6 significant digits.

    ``metadata`` goes into leading ``#`` comment lines.
    """
    if not rows:
        raise ValueError("no rows to write")
    cols = csv_columns(type(rows[0]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(getattr(row, c)) for c in cols])


def study_metadata(cfg: StudyConfig) -> dict:
    return {
        "example": cfg.example.value, "m": cfg.m, "hu": cfg.hu,
        "mu": cfg.mu if cfg.mu is not None else 3 * cfg.m * cfg.m,
        "rho": cfg.step, "tol_u": cfg.tol_u,
        "h": "grid spacing 1/n; h_u = 1/n_u",
    }


def write_vtk(path, sol: OcpSolution, cell_data: dict | None = None, subdiv: int = 2) -> None:
    """Legacy ASCII VTK file with ``y_h``, ``p_h`` and ``u_h`` on a subdivided mesh.

    Each state element is split into ``subdiv^2`` triangles with their own
    vertices, so discontinuities survive.  ``cell_data`` entries with one
    value per state element are repeated on its sub-triangles.
    """
    space = sol.y.space
    mesh = space.mesh
    k = subdiv
    # reference sub-vertices (i, j) with i + j <= k
    ref = [(i / k, j / k) for j in range(k + 1) for i in range(k + 1 - j)]
    idx = {}
    for a, (i, j) in enumerate((i, j) for j in range(k + 1) for i in range(k + 1 - j)):
        idx[i, j] = a
    tris = []
    for j in range(k):
        for i in range(k - j):
            tris.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j + 1 < k:
                tris.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    ref = np.array(ref)
    tris = np.array(tris)
    c = mesh.corners()
    pts = (c[:, None, 0] + ref[None, :, 0, None] * (c[:, None, 1] - c[:, None, 0])
           + ref[None, :, 1, None] * (c[:, None, 2] - c[:, None, 0]))
    ne, nr = pts.shape[:2]
    elems = np.arange(ne)
    # pull points a hair toward the barycenter so evaluation stays inside the element
    inner = pts + 1e-12 * (mesh.barycenters[:, None, :] - pts)
    y = space.eval(sol.y.coef, elems, inner)
    p = space.eval(sol.p.coef, elems, inner)
    if sol.u.mode == "piecewise_constant":
        u = sol.u.values[sol.u.mesh.locate(inner)]
    else:
        # sampled control: element mean of the samples
        vol = sol.u.space.volume()
        u = np.repeat((np.sum(vol.weights * sol.u.values, axis=1) / mesh.areas)[:, None], nr, axis=1)
    cells = (elems[:, None, None] * nr + tris[None]).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nrdaocp solution\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        flat = pts.reshape(-1, 2)
        fh.write(f"POINTS {len(flat)} double\n")
        np.savetxt(fh, np.column_stack([flat, np.zeros(len(flat))]), fmt="%.10g")
        fh.write(f"CELLS {len(cells)} {4 * len(cells)}\n")
        np.savetxt(fh, np.column_stack([np.full(len(cells), 3), cells]), fmt="%d")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(fh, np.full(len(cells), 5), fmt="%d")
        fh.write(f"POINT_DATA {len(flat)}\n")
        for name, vals in (("y_h", y), ("p_h", p), ("u_h", u)):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, np.asarray(vals).reshape(-1), fmt="%.10g")
        if cell_data:
            fh.write(f"CELL_DATA {len(cells)}\n")
            per = len(tris)
            for name, vals in cell_data.items():
                vals = np.asarray(vals, dtype=float)
                if vals.shape != (ne,):
                    raise ValueError(f"cell field {name!r} needs one value per state element")
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(fh, np.repeat(vals, per), fmt="%.10g")
