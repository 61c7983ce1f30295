"""Symmetric interior penalty forms on the reconstructed space.

Everything is assembled in the broken monomial space first (``Ahat``) and
then restricted with the reconstruction matrix, ``M = R^T Ahat R``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import linalg
from .mesh import TriMesh
from .quadrature import basis_dim, edge_rule, map_triangle, monomials, triangle_rule
from .reconstruction import ReconstructionMatrix, assemble_reconstruction


def default_penalty(m: int) -> float:
    return 3.0 * m * m


@dataclass
class VolumeTable:
    points: np.ndarray      # (ne, nq, 2)
    weights: np.ndarray     # (ne, nq)
    phi: np.ndarray         # (ne, nq, dim)
    grad: Optional[np.ndarray] = None   # (ne, nq, dim, 2)
    hess: Optional[np.ndarray] = None   # (ne, nq, dim, 2, 2)


@dataclass
class EdgeTable:
    points: np.ndarray      # (E, nq, 2)
    weights: np.ndarray     # (E, nq)
    normals: np.ndarray     # (E, 2), outward from side 0
    lengths: np.ndarray     # (E,)
    elements: np.ndarray    # (E, 2), -1 on the boundary
    phi: tuple              # per side (E, nq, dim)
    grad: tuple             # per side (E, nq, dim, 2)


class RDASpace:
    """Reconstructed discontinuous approximation space of degree ``m``.

    Holds the mesh, the reconstruction operator, the penalty and cached
    quadrature tables.  The degrees of freedom are one value per element.
    """

    def __init__(self, mesh: TriMesh, m: int, mu: float | None = None,
                 threshold: int | None = None,
                 recon: ReconstructionMatrix | None = None):
        if m < 1:
            raise ValueError("degree m must be >= 1")
        self.mesh = mesh
        self.m = int(m)
        self.dim = basis_dim(self.m)
        self.mu = default_penalty(self.m) if mu is None else float(mu)
        if self.mu <= 0:
            raise ValueError(f"penalty must be positive, got {self.mu}")
        self.recon = recon if recon is not None else assemble_reconstruction(mesh, self.m, threshold)
        self.R = self.recon.matrix
        self.assembly_degree = max(2 * self.m + 2, 6)
        self.error_degree = 2 * self.m + 4
        self._vol = {}
        self._edge = {}

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_elements

    def scaled(self, elems, points):
        c = self.mesh.barycenters[elems]
        h = self.mesh.diameters[elems]
        if points.ndim == 3:
            c = c[:, None, :]
            h = h[:, None]
        return (points[..., 0] - c[..., 0]) / h, (points[..., 1] - c[..., 1]) / h, h

    def basis_at(self, elems, points, order=0):
        """Basis tables of elements ``elems`` at physical ``points``.

        ``points`` is (k, 2) or (k, nq, 2) matching ``elems`` (k,).
        """
        s, t, h = self.scaled(elems, points)
        res = monomials(self.m, s, t, order)
        if order >= 1:
            res[1] = res[1] / h[..., None, None]
        if order == 2:
            res[2] = res[2] / h[..., None, None, None] ** 2
        return res

    def volume(self, degree=None, order=1) -> VolumeTable:
        degree = self.assembly_degree if degree is None else degree
        key = degree
        tab = self._vol.get(key)
        if tab is None or (order >= 2 and tab.hess is None):
            rule = triangle_rule(degree)
            pts, w = map_triangle(rule, self.mesh.corners())
            elems = np.arange(self.mesh.n_elements)
            res = self.basis_at(elems, pts, order=max(order, 1))
            tab = VolumeTable(pts, w, res[0], res[1], res[2] if order == 2 else None)
            self._vol[key] = tab
        return tab

    def edges(self, degree=None) -> EdgeTable:
        degree = self.assembly_degree if degree is None else degree
        tab = self._edge.get(degree)
        if tab is None:
            mesh = self.mesh
            rule = edge_rule(degree)
            ev = mesh.vertices[mesh.edge_vertices]
            t = rule.points
            pts = ev[:, None, 0, :] + t[None, :, None] * (ev[:, None, 1, :] - ev[:, None, 0, :])
            w = mesh.edge_lengths[:, None] * rule.weights[None, :]
            ee = mesh.edge_elements
            phi, grad = [], []
            for side in (0, 1):
                k = np.where(ee[:, side] >= 0, ee[:, side], ee[:, 0])
                v, g = self.basis_at(k, pts, order=1)
                if side == 1:
                    mask = (ee[:, 1] >= 0)[:, None, None]
                    v = v * mask
                    g = g * mask[..., None]
                phi.append(v)
                grad.append(g)
            tab = EdgeTable(pts, w, mesh.edge_normals, mesh.edge_lengths, ee,
                            tuple(phi), tuple(grad))
            self._edge[degree] = tab
        return tab

    def eval(self, coef, elems, points, order=0):
        """Evaluate per-element coefficients at points lying in ``elems``."""
        res = self.basis_at(elems, points, order)
        c = coef[elems]
        if points.ndim == 3:
            c = c[:, None, :]
        out = [np.einsum("...a,...a->...", res[0], c)]
        if order >= 1:
            out.append(np.einsum("...ai,...a->...i", res[1], c))
        if order == 2:
            out.append(np.einsum("...aij,...a->...ij", res[2], c))
        return out if order else out[0]


@dataclass
class EllipticCoeffs:
    """Diffusion tensor, its gradient, penalty and default data.

    ``A`` maps points ``(..., 2)`` to ``(..., 2, 2)``; ``None`` is the
    identity.  ``grad_A`` returns ``(..., 2, 2, 2)`` with index order
    ``[..., k, i, j] = d A_ij / d x_k``.
    """
    A: Optional[Callable] = None
    grad_A: Optional[Callable] = None
    source: Optional[Callable] = None
    boundary: Optional[Callable] = None
    lam: Optional[float] = None
    Lam: Optional[float] = None

    def tensor(self, points):
        if self.A is None:
            return None
        A = np.asarray(self.A(points), dtype=float)
        if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=1e-12, atol=1e-14):
            raise ValueError("diffusion tensor must be symmetric")
        return A

    def flux(self, points, grad):
        """``A grad`` for basis gradients ``(..., dim, 2)``."""
        A = self.tensor(points)
        if A is None:
            return grad
        return np.einsum("...ij,...aj->...ai", A, grad)

    def divergence(self, points, grad, hess):
        """``div(A grad u)`` for scalar gradients ``(..., 2)`` and Hessians ``(..., 2, 2)``."""
        if self.A is None:
            return np.trace(hess, axis1=-2, axis2=-1)
        if self.grad_A is None:
            raise ValueError("grad_A is required for a variable diffusion tensor")
        A = self.tensor(points)
        dA = np.asarray(self.grad_A(points), dtype=float)
        return (np.einsum("...iij,...j->...", dA, grad)
                + np.einsum("...ij,...ij->...", A, hess))


class DGField:
    """A reconstructed field: one value per element plus its polynomial view."""

    def __init__(self, space: RDASpace, dofs):
        self.space = space
        self.dofs = np.asarray(dofs, dtype=float)
        if self.dofs.shape != (space.n_dofs,):
            raise ValueError(f"expected {space.n_dofs} dofs, got {self.dofs.shape}")

    @cached_property
    def coef(self):
        return self.space.recon.apply(self.dofs)

    def values(self, degree=None):
        tab = self.space.volume(degree)
        return np.einsum("kqa,ka->kq", tab.phi, self.coef)

    def gradients(self, degree=None):
        tab = self.space.volume(degree)
        return np.einsum("kqai,ka->kqi", tab.grad, self.coef)

    def hessians(self, degree=None):
        tab = self.space.volume(degree, order=2)
        return np.einsum("kqaij,ka->kqij", tab.hess, self.coef)

    def __call__(self, elems, points, order=0):
        return self.space.eval(self.coef, elems, points, order)


def _source_values(space, source, degree=None):
    tab = space.volume(degree)
    if source is None:
        return None
    if callable(source):
        return np.broadcast_to(np.asarray(source(tab.points), dtype=float), tab.weights.shape)
    source = np.asarray(source, dtype=float)
    if source.shape != tab.weights.shape:
        raise ValueError(f"source samples must have shape {tab.weights.shape}, got {source.shape}")
    return source


def _edge_blocks(space, coeffs, tab, idx):
    """Per-edge jump/average tables for the edges ``idx``."""
    n = tab.normals[idx][:, None, None, :]
    pts = tab.points[idx]
    sides = []
    for s in (0, 1):
        v = tab.phi[s][idx]
        g = coeffs.flux(pts, tab.grad[s][idx])
        sides.append((v, np.sum(g * n, axis=-1)))
    return sides


def assemble_stiffness_hat(space: RDASpace, coeffs: EllipticCoeffs):
    """SIPG matrix on the broken polynomial space, shape ``(ne*dim, ne*dim)``."""
    mesh = space.mesh
    dim = space.dim
    mu = space.mu
    vol = space.volume()
    flux = coeffs.flux(vol.points, vol.grad)
    Kloc = np.einsum("kq,kqai,kqbi->kab", vol.weights, vol.grad, flux)
    ne = mesh.n_elements
    base = np.arange(ne)[:, None] * dim + np.arange(dim)[None, :]
    rows = [np.repeat(base, dim, axis=1).ravel()]
    cols = [np.tile(base, (1, dim)).ravel()]
    vals = [Kloc.ravel()]

    tab = space.edges()
    ee = mesh.edge_elements
    for idx, interior in ((mesh.interior_edges, True), (mesh.boundary_edges, False)):
        if len(idx) == 0:
            continue
        (v0, f0), (v1, f1) = _edge_blocks(space, coeffs, tab, idx)
        if interior:
            J = np.concatenate([v0, -v1], axis=-1)
            Avg = 0.5 * np.concatenate([f0, f1], axis=-1)
            dofs = np.concatenate([ee[idx, 0:1] * dim + np.arange(dim),
                                   ee[idx, 1:2] * dim + np.arange(dim)], axis=1)
        else:
            J, Avg = v0, f0
            dofs = ee[idx, 0:1] * dim + np.arange(dim)
        w = tab.weights[idx]
        pen = (mu / tab.lengths[idx])[:, None] * w
        E = (-np.einsum("eq,eqi,eqj->eij", w, J, Avg)
             - np.einsum("eq,eqj,eqi->eij", w, J, Avg)
             + np.einsum("eq,eqi,eqj->eij", pen, J, J))
        nd = dofs.shape[1]
        rows.append(np.repeat(dofs, nd, axis=1).ravel())
        cols.append(np.tile(dofs, (1, nd)).ravel())
        vals.append(E.ravel())
    N = ne * dim
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    A.sum_duplicates()
    return A


def assemble_stiffness(space: RDASpace, coeffs: EllipticCoeffs):
    """Stiffness matrix on the one-value-per-element space, ``R^T Ahat R``."""
    M = linalg.triple_product(space.R, assemble_stiffness_hat(space, coeffs))
    return linalg.as_sparse(0.5 * (M + M.T))


def assemble_load_hat(space: RDASpace, coeffs: EllipticCoeffs, source=None, boundary=None):
    """Load vector on the broken polynomial space, flattened ``(ne*dim,)``."""
    dim = space.dim
    b = np.zeros((space.mesh.n_elements, dim))
    s = _source_values(space, source)
    if s is not None:
        vol = space.volume()
        b += np.einsum("kq,kq,kqa->ka", vol.weights, s, vol.phi)
    if boundary is not None:
        mesh = space.mesh
        idx = mesh.boundary_edges
        tab = space.edges()
        (v0, f0), _ = _edge_blocks(space, coeffs, tab, idx)
        g = np.asarray(boundary(tab.points[idx]), dtype=float)
        g = np.broadcast_to(g, tab.weights[idx].shape)
        w = tab.weights[idx]
        pen = space.mu / tab.lengths[idx]
        contrib = np.einsum("eq,eq,eqa->ea", w, g, -f0 + pen[:, None, None] * v0)
        np.add.at(b, mesh.edge_elements[idx, 0], contrib)
    return b.ravel()


def assemble_load(space: RDASpace, coeffs: EllipticCoeffs, source=None, boundary=None):
    """Load vector ``R^T bhat`` for volume ``source`` and Dirichlet data ``boundary``.

    ``source`` is a callable on points or an array of samples at the
    assembly quadrature points, shape ``(ne, nq)``.
    """
    return space.R.T @ assemble_load_hat(space, coeffs, source, boundary)


class EllipticSolver:
    """Discrete solution operator with a cached factorization."""

    def __init__(self, space: RDASpace, coeffs: EllipticCoeffs | None = None,
                 prefer: str = "direct", tol: float = 1e-12):
        self.space = space
        self.coeffs = coeffs if coeffs is not None else EllipticCoeffs()
        self.matrix = assemble_stiffness(space, self.coeffs)
        self.prefer = prefer
        self.tol = tol
        self.factor = linalg.SPDFactor(self.matrix) if prefer == "direct" else None
        self.last_stats = None

    def solve_rhs(self, rhs) -> DGField:
        x, stats = linalg.spd_solve(self.matrix, rhs, tol=self.tol, prefer=self.prefer,
                                    factor=self.factor)
        self.last_stats = stats
        return DGField(self.space, x)

    def solve(self, source=None, boundary=None) -> DGField:
        return self.solve_rhs(assemble_load(self.space, self.coeffs, source, boundary))


def solve_elliptic(space: RDASpace, coeffs: EllipticCoeffs | None = None,
                   source=None, boundary=None) -> DGField:
    """Discrete solution of ``-div(A grad y) = source``, ``y = boundary`` on the boundary."""
    coeffs = coeffs if coeffs is not None else EllipticCoeffs()
    source = coeffs.source if source is None else source
    boundary = coeffs.boundary if boundary is None else boundary
    return EllipticSolver(space, coeffs).solve(source, boundary)


# ---- norms -----------------------------------------------------------------

def _error_parts(space, field, exact, exact_grad, pts, elems, need_grad):
    shape = pts.shape[:-1]
    val = np.zeros(shape)
    grad = np.zeros(shape + (2,)) if need_grad else None
    if exact is not None:
        val = val + np.asarray(exact(pts), dtype=float)
    if need_grad and exact_grad is not None:
        grad = grad + np.asarray(exact_grad(pts), dtype=float)
    if field is not None:
        fv = field(elems, pts, order=1 if need_grad else 0)
        if need_grad:
            val = val - fv[0]
            grad = grad - fv[1]
        else:
            val = val - fv
    return val, grad


def dg_norm(space: RDASpace, field: DGField | None = None, exact=None, exact_grad=None,
            variant: str = "plain", degree: int | None = None) -> float:
    """DG norm of ``exact - field`` (either may be omitted).

    ``variant="plain"`` is the broken H1 seminorm plus ``mu/h_e`` weighted
    jumps; ``"triple"`` adds ``h_e/mu`` weighted averages of the gradient.
    """
    if variant not in ("plain", "triple"):
        raise ValueError(f"unknown DG norm variant {variant!r}")
    degree = space.error_degree if degree is None else degree
    mesh = space.mesh
    vol = space.volume(degree)
    elems = np.arange(mesh.n_elements)
    _, g = _error_parts(space, field, exact, exact_grad, vol.points, elems, True)
    total = np.sum(vol.weights * np.sum(g * g, axis=-1))

    tab = space.edges(degree)
    ee = mesh.edge_elements
    pts = tab.points
    v0, g0 = _error_parts(space, field, exact, exact_grad, pts, ee[:, 0], True)
    k1 = np.where(ee[:, 1] >= 0, ee[:, 1], ee[:, 0])
    v1, g1 = _error_parts(space, field, exact, exact_grad, pts, k1, True)
    interior = (ee[:, 1] >= 0)[:, None]
    jump = np.where(interior, v0 - v1, v0)
    total += np.sum(space.mu / tab.lengths[:, None] * tab.weights * jump ** 2)
    if variant == "triple":
        avg = np.where(interior[..., None], 0.5 * (g0 + g1), g0)
        total += np.sum(tab.lengths[:, None] / space.mu * tab.weights * np.sum(avg ** 2, axis=-1))
    return float(np.sqrt(total))


def l2_error_elementwise(space: RDASpace, field: DGField | None, exact=None, degree=None):
    """Squared L2 norm of ``exact - field`` on each element."""
    degree = space.error_degree if degree is None else degree
    vol = space.volume(degree)
    e = np.zeros(vol.weights.shape)
    if exact is not None:
        e = e + np.asarray(exact(vol.points), dtype=float)
    if field is not None:
        e = e - field.values(degree)
    return np.sum(vol.weights * e * e, axis=1)


def l2_error(space: RDASpace, field: DGField | None, exact=None, degree=None) -> float:
    """L2 norm of ``exact - field`` over the domain."""
    return float(np.sqrt(np.sum(l2_error_elementwise(space, field, exact, degree))))


def inner(space: RDASpace, f: DGField, g: DGField | np.ndarray, degree=None) -> float:
    """L2 inner product of a field with another field or with element constants."""
    vol = space.volume(degree)
    fv = f.values(degree)
    if isinstance(g, DGField):
        gv = g.values(degree)
    else:
        gv = np.asarray(g, dtype=float)[:, None]
    return float(np.sum(vol.weights * fv * gv))
