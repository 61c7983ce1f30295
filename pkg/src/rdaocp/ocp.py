"""Distributed optimal control on the reconstructed space.

The control lives either on its own piecewise-constant mesh (nested with
the state mesh) or, in the variational variant, as samples at the state
quadrature points.  The discrete optimality system is solved with projected
gradient descent: state solve, adjoint solve, projected control update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .ipdg import DGField, EllipticCoeffs, EllipticSolver, RDASpace, assemble_load
from .mesh import TriMesh, nested
from .quadrature import map_triangle, triangle_rule

log = logging.getLogger(__name__)

CONTROL_QUAD_DEGREE = 4
_CACHE_ENTRIES = 3_000_000
_CHUNK = 200_000


class PGDError(RuntimeError):
    pass


class PGDDivergenceError(PGDError):
    pass


# ---- admissible sets -------------------------------------------------------

@dataclass(frozen=True)
class Unconstrained:
    def project(self, v, weights):
        return v


@dataclass(frozen=True)
class LowerBound:
    gamma: float = 0.0

    def project(self, v, weights):
        return np.maximum(v, self.gamma)


@dataclass(frozen=True)
class Box:
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"box constraint needs lower < upper, got {self.lower}, {self.upper}")

    def project(self, v, weights):
        return np.clip(v, self.lower, self.upper)


@dataclass(frozen=True)
class IntegralLowerBound:
    gamma: float = 0.0

    def project(self, v, weights):
        total = np.sum(weights * v)
        if total >= self.gamma:
            return v
        return v + (self.gamma - total) / np.sum(weights)


Constraint = (Unconstrained, LowerBound, Box, IntegralLowerBound)


# ---- problem description ---------------------------------------------------

@dataclass
class ExactSolution:
    y: Callable
    u: Callable
    p: Callable
    grad_y: Optional[Callable] = None
    grad_p: Optional[Callable] = None


@dataclass
class ProblemSpec:
    """Optimal control problem ``min g(y) + j(u)`` subject to the state equation.

    Callbacks take ``(value, points)`` with ``points`` of shape ``(..., 2)``.
    ``coeffs.source`` is ``f`` and ``coeffs.boundary`` is the Dirichlet
    datum; ``B`` is ``c_B`` times the identity on the same domain.
    """
    coeffs: EllipticCoeffs
    g_prime: Callable
    j_prime: Callable
    g: Optional[Callable] = None
    j: Optional[Callable] = None
    c_B: float = 1.0
    alpha: float = 1.0
    beta: float = 0.0
    constraint: object = field(default_factory=Unconstrained)
    exact: Optional[ExactSolution] = None
    u_d: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("j must be strongly convex (alpha > 0)")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not isinstance(self.constraint, Constraint):
            raise TypeError(f"unsupported admissible set {self.constraint!r}")


# ---- control fields and transfers -------------------------------------------

@dataclass
class ControlField:
    """Control values: one per control element, or samples at state quadrature points."""
    values: np.ndarray
    mesh: Optional[TriMesh] = None
    space: Optional[RDASpace] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if (self.mesh is None) == (self.space is None):
            raise ValueError("give exactly one of mesh (piecewise constant) or space (sampled)")

    @property
    def mode(self) -> str:
        return "piecewise_constant" if self.mesh is not None else "sampled"

    @property
    def weights(self):
        if self.mesh is not None:
            return self.mesh.areas
        return self.space.volume().weights

    def integral(self) -> float:
        return float(np.sum(self.weights * self.values))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights * self.values ** 2)))

    def copy_with(self, values) -> "ControlField":
        return ControlField(values, self.mesh, self.space)


def project_admissible(v: ControlField, constraint) -> ControlField:
    """L2 projection of ``v`` onto the admissible set within its own representation."""
    if not np.all(np.isfinite(v.values)):
        raise ValueError("control values must be finite")
    return v.copy_with(constraint.project(v.values, v.weights))


def l2_project_control(func, control_mesh: TriMesh, degree=CONTROL_QUAD_DEGREE) -> ControlField:
    """Element means of ``func`` on ``control_mesh``."""
    degree = max(degree, CONTROL_QUAD_DEGREE)
    rule = triangle_rule(degree)
    out = np.empty(control_mesh.n_elements)
    for start in range(0, control_mesh.n_elements, _CHUNK):
        ids = np.arange(start, min(start + _CHUNK, control_mesh.n_elements))
        pts, w = map_triangle(rule, control_mesh.corners(ids))
        out[ids] = np.sum(w * func(pts), axis=1) / control_mesh.areas[ids]
    return ControlField(out, mesh=control_mesh)


class ControlTransfer:
    """Couples a state space with a nested piecewise-constant control mesh.

    Integrals are taken on the finer of the two meshes, where the control is
    constant and the state is a single polynomial, so the transfers are exact.
    """

    def __init__(self, space: RDASpace, control_mesh: TriMesh, c_B: float = 1.0):
        self.space = space
        self.control = control_mesh
        self.c_B = float(c_B)
        state = space.mesh
        if control_mesh is state:
            self.fine = state
            self.state_of = np.arange(state.n_elements)
            self.control_of = self.state_of
        elif control_mesh.n_elements >= state.n_elements:
            self.fine = control_mesh
            self.state_of = nested(state, control_mesh)
            self.control_of = np.arange(control_mesh.n_elements)
        else:
            self.fine = state
            self.control_of = nested(control_mesh, state)
            self.state_of = np.arange(state.n_elements)
        self._cache = {}
        self._T = None

    def chunks(self, degree):
        """Yield ``(points, weights, state_ids, control_ids)`` over the fine mesh."""
        cached = self._cache.get(degree)
        if cached is not None:
            yield cached
            return
        rule = triangle_rule(degree)
        nf = self.fine.n_elements
        small = nf * len(rule) <= _CACHE_ENTRIES
        for start in range(0, nf, _CHUNK):
            ids = np.arange(start, min(start + _CHUNK, nf))
            pts, w = map_triangle(rule, self.fine.corners(ids))
            item = (pts, w, self.state_of[ids], self.control_of[ids])
            if small and nf <= _CHUNK:
                self._cache[degree] = item
            yield item

    @property
    def T(self):
        """Sparse map from control values to broken load coefficients (if small)."""
        if self._T is None and self.fine.n_elements * self.space.dim <= _CACHE_ENTRIES:
            dim = self.space.dim
            rows, cols, vals = [], [], []
            for pts, w, s, c in self.chunks(max(self.space.m, 1)):
                phi = self.space.basis_at(s, pts)[0]
                mom = self.c_B * np.einsum("kq,kqa->ka", w, phi)
                rows.append((s[:, None] * dim + np.arange(dim)).ravel())
                cols.append(np.repeat(c, dim))
                vals.append(mom.ravel())
            n = self.space.mesh.n_elements * dim
            T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, self.control.n_elements))
            T.sum_duplicates()
            self._T = T
        return self._T

    def apply_B_hat(self, u_values):
        """Broken load coefficients of ``(c_B u, w)``."""
        T = self.T
        if T is not None:
            return T @ u_values
        dim = self.space.dim
        out = np.zeros((self.space.mesh.n_elements, dim))
        for pts, w, s, c in self.chunks(max(self.space.m, 1)):
            phi = self.space.basis_at(s, pts)[0]
            mom = np.einsum("kq,kqa->ka", w * u_values[c][:, None], phi)
            for a in range(dim):
                out[:, a] += np.bincount(s, mom[:, a], minlength=len(out))
        return self.c_B * out.ravel()

    def B_star_means(self, p: DGField):
        """Mean of ``c_B p`` over each control element."""
        T = self.T
        if T is not None:
            return (T.T @ p.coef.ravel()) / self.control.areas
        acc = np.zeros(self.control.n_elements)
        for pts, w, s, c in self.chunks(max(self.space.m, 1)):
            vals = self.space.eval(p.coef, s, pts)
            acc += np.bincount(c, np.sum(w * vals, axis=1), minlength=len(acc))
        return self.c_B * acc / self.control.areas

    def control_means(self, func, u_values=None, degree=CONTROL_QUAD_DEGREE):
        """Element means over the control mesh of ``func(u, points)`` (or ``func(points)``)."""
        acc = np.zeros(self.control.n_elements)
        for pts, w, s, c in self.chunks(degree):
            if u_values is None:
                vals = func(pts)
            else:
                vals = func(np.broadcast_to(u_values[c][:, None], w.shape), pts)
            acc += np.bincount(c, np.sum(w * vals, axis=1), minlength=len(acc))
        return acc / self.control.areas


def apply_B(u: ControlField, transfer: ControlTransfer | None = None, space: RDASpace | None = None,
            c_B: float = 1.0):
    """Load vector (one entry per state element) of ``(c_B u, w)``."""
    if u.mode == "sampled":
        sp_ = u.space
        vol = sp_.volume()
        bhat = c_B * np.einsum("kq,kq,kqa->ka", vol.weights, u.values, vol.phi).ravel()
        return sp_.R.T @ bhat
    if transfer is None:
        transfer = ControlTransfer(space, u.mesh, c_B)
    return transfer.space.R.T @ transfer.apply_B_hat(u.values)


def apply_B_star(p: DGField, transfer: ControlTransfer | None = None,
                 control_mesh: TriMesh | None = None, c_B: float = 1.0):
    """``B^* p``: control-element means, or samples when ``control_mesh`` is ``None``."""
    if transfer is None and control_mesh is None:
        return c_B * p.values()
    if transfer is None:
        transfer = ControlTransfer(p.space, control_mesh, c_B)
    return transfer.B_star_means(p)


# ---- solver ----------------------------------------------------------------

@dataclass
class OcpSolution:
    u: ControlField
    y: DGField
    p: DGField
    gradient: np.ndarray           # j'(u) + B^* p: means, or samples
    update_norms: list
    objectives: list
    ratios: list
    converged: bool
    rho: float
    iterations: int
    history: list = field(default_factory=list, repr=False)


class _Problem:
    """Shared machinery for both control representations."""

    def __init__(self, spec, space, solver):
        self.spec = spec
        self.space = space
        self.solver = solver if solver is not None else EllipticSolver(space, spec.coeffs)
        self.b_f = assemble_load(space, spec.coeffs, spec.coeffs.source, spec.coeffs.boundary)
        self.vol = space.volume()

    def state(self, b_u):
        return self.solver.solve_rhs(self.b_f + b_u)

    def adjoint(self, y):
        gp = self.spec.g_prime(y.values(), self.vol.points)
        return self.solver.solve_rhs(assemble_load(self.space, self.spec.coeffs, gp, None))

    def state_objective(self, y):
        if self.spec.g is None:
            return np.nan
        return float(np.sum(self.vol.weights * self.spec.g(y.values(), self.vol.points)))


class _PiecewiseConstant(_Problem):
    def __init__(self, spec, space, control_mesh, solver, mean_mode):
        super().__init__(spec, space, solver)
        self.transfer = ControlTransfer(space, control_mesh, spec.c_B)
        self.mesh = control_mesh
        if mean_mode not in ("quadrature", "barycenter"):
            raise ValueError(f"unknown mean mode {mean_mode!r}")
        self.mean_mode = mean_mode

    def load(self, u):
        return self.space.R.T @ self.transfer.apply_B_hat(u.values)

    def gradient(self, u, p):
        if self.mean_mode == "barycenter":
            jp = self.spec.j_prime(u.values, self.mesh.barycenters)
        else:
            jp = self.transfer.control_means(self.spec.j_prime, u.values)
        return jp + self.transfer.B_star_means(p)

    def control_objective(self, u):
        if self.spec.j is None:
            return np.nan
        means = self.transfer.control_means(self.spec.j, u.values)
        return float(np.sum(means * self.mesh.areas))

    def zero(self):
        return ControlField(np.zeros(self.mesh.n_elements), mesh=self.mesh)


class _Sampled(_Problem):
    def load(self, u):
        bhat = self.spec.c_B * np.einsum("kq,kq,kqa->ka", self.vol.weights, u.values, self.vol.phi)
        return self.space.R.T @ bhat.ravel()

    def gradient(self, u, p):
        return self.spec.j_prime(u.values, self.vol.points) + self.spec.c_B * p.values()

    def control_objective(self, u):
        if self.spec.j is None:
            return np.nan
        return float(np.sum(self.vol.weights * self.spec.j(u.values, self.vol.points)))

    def zero(self):
        return ControlField(np.zeros(self.vol.weights.shape), space=self.space)


def _run(problem, constraint, rho, u0, tol_u, max_iter, reference, record_objective,
         max_halvings=6, patience=10):
    u_init = u0 if u0 is not None else project_admissible(problem.zero(), constraint)
    for attempt in range(max_halvings + 1):
        u = u_init
        norms, objs, ratios, hist = [], [], [], []
        growth = 0
        diverged = False
        converged = False
        for it in range(max_iter):
            y = problem.state(problem.load(u))
            p = problem.adjoint(y)
            if record_objective:
                objs.append(problem.state_objective(y) + problem.control_objective(u))
            grad = problem.gradient(u, p)
            u_new = project_admissible(u.copy_with(u.values - rho * grad), constraint)
            dn = u_new.copy_with(u_new.values - u.values).norm()
            if reference is not None:
                a = u.copy_with(u.values - reference.values).norm()
                b = u_new.copy_with(u_new.values - reference.values).norm()
                ratios.append(b / a if a > 0 else 0.0)
            hist.append(u_new.values.copy() if reference is not None else None)
            growth = growth + 1 if norms and dn > norms[-1] else 0
            norms.append(dn)
            log.debug("pgd iter %d  |du| = %.3e", it + 1, dn)
            if not np.isfinite(dn) or growth >= patience:
                diverged = True
                break
            u = u_new
            if dn <= tol_u:
                converged = True
                break
        if not diverged:
            break
        log.warning("projected gradient iteration diverges with rho=%g; halving", rho)
        rho *= 0.5
    else:
        raise PGDDivergenceError(
            f"projected gradient descent diverged after {max_halvings} step-size halvings "
            f"(last rho={rho:g}); choose rho with 0 <= 1 - 2*alpha*rho + C*rho^2 < 1")
    y = problem.state(problem.load(u))
    p = problem.adjoint(y)
    grad = problem.gradient(u, p)
    if record_objective:
        objs.append(problem.state_objective(y) + problem.control_objective(u))
    return OcpSolution(u, y, p, grad, norms, objs, ratios, converged, rho, len(norms),
                       [h for h in hist if h is not None])


def pgd_solve(spec: ProblemSpec, space: RDASpace, control_mesh: TriMesh, rho: float = 1.0,
              u0: ControlField | None = None, tol_u: float = 1e-10, max_iter: int = 500,
              reference: ControlField | None = None, record_objective: bool = True,
              mean_mode: str = "barycenter", solver: EllipticSolver | None = None) -> OcpSolution:
    """Projected gradient descent with a piecewise-constant control on ``control_mesh``.

    ``reference`` (a converged control) turns on recording of the
    contraction ratios ``|u_{n+1} - u_ref| / |u_n - u_ref|``.
    ``mean_mode`` selects how ``j'(u)`` is taken per control element:
    ``"barycenter"`` samples it there, ``"quadrature"`` averages it.
    """
    if rho <= 0:
        raise ValueError("step size rho must be positive")
    problem = _PiecewiseConstant(spec, space, control_mesh, solver, mean_mode)
    return _run(problem, spec.constraint, rho, u0, tol_u, max_iter, reference, record_objective)


def variational_pgd_solve(spec: ProblemSpec, space: RDASpace, rho: float = 1.0,
                          tol: float = 1e-10, max_iter: int = 500,
                          u0: ControlField | None = None,
                          reference: ControlField | None = None,
                          record_objective: bool = True,
                          solver: EllipticSolver | None = None) -> OcpSolution:
    """Projected gradient descent without a control mesh.

    The control is stored at the assembly quadrature points of the state mesh.
    """
    if rho <= 0:
        raise ValueError("step size rho must be positive")
    problem = _Sampled(spec, space, solver)
    return _run(problem, spec.constraint, rho, u0, tol, max_iter, reference, record_objective)


def objective(y: DGField, u: ControlField, spec: ProblemSpec) -> float:
    """``g(y) + j(u)`` by quadrature."""
    if spec.g is None or spec.j is None:
        raise ValueError("objective needs the primitives g and j")
    vol = y.space.volume()
    total = float(np.sum(vol.weights * spec.g(y.values(), vol.points)))
    if u.mode == "sampled":
        uv = u.space.volume()
        return total + float(np.sum(uv.weights * spec.j(u.values, uv.points)))
    transfer = ControlTransfer(y.space, u.mesh, spec.c_B)
    return total + float(np.sum(transfer.control_means(spec.j, u.values) * u.mesh.areas))


def kkt_violation(sol: OcpSolution, constraint, tol=1e-10) -> np.ndarray:
    """Per-entry violation of the discrete variational inequality.

    For bound constraints: ``|g|`` where the control is strictly inside the
    bounds, ``max(0, -g)`` at the lower bound and ``max(0, g)`` at the upper
    bound, with ``g`` the (mean) gradient ``j'(u) + B^* p``.  For the integral
    constraint the gradient must equal a constant ``lambda >= 0`` while the
    constraint is active, and vanish otherwise.
    """
    u = sol.u.values
    g = sol.gradient
    if isinstance(constraint, Unconstrained):
        return np.abs(g)
    if isinstance(constraint, IntegralLowerBound):
        w = sol.u.weights
        slack = sol.u.integral() - constraint.gamma
        if slack > tol * max(1.0, np.sum(w * np.abs(u))):
            return np.abs(g)
        lam = np.sum(w * g) / np.sum(w)
        return np.abs(g - lam) + max(0.0, -lam)
    lo = getattr(constraint, "gamma", getattr(constraint, "lower", -np.inf))
    hi = getattr(constraint, "upper", np.inf)
    at_lo = u <= lo + tol
    at_hi = u >= hi - tol
    out = np.abs(g)
    out = np.where(at_lo, np.maximum(0.0, -g), out)
    out = np.where(at_hi, np.maximum(0.0, g), out)
    return out


def control_error(u: ControlField, exact, transfer: ControlTransfer | None = None,
                  degree=CONTROL_QUAD_DEGREE, elementwise=False):
    """L2 error ``|exact - u|`` of a control field."""
    if u.mode == "sampled":
        vol = u.space.volume()
        e2 = np.sum(vol.weights * (exact(vol.points) - u.values) ** 2, axis=1)
        return e2 if elementwise else float(np.sqrt(e2.sum()))
    rule = triangle_rule(degree)
    mesh = u.mesh
    e2 = np.empty(mesh.n_elements)
    for start in range(0, mesh.n_elements, _CHUNK):
        ids = np.arange(start, min(start + _CHUNK, mesh.n_elements))
        pts, w = map_triangle(rule, mesh.corners(ids))
        e2[ids] = np.sum(w * (exact(pts) - u.values[ids, None]) ** 2, axis=1)
    return e2 if elementwise else float(np.sqrt(e2.sum()))
