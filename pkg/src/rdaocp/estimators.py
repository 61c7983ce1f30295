"""Residual-type a posteriori indicators, patch recovery and effectivity ratios.

Element and edge weights use ``h/mu``: the volume residual is scaled by
``(h_K/mu)^2``, jumps of the field by ``(h_e/mu)^(1/2)`` and normal flux
jumps by ``(h_e/mu)^(3/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ipdg import DGField, EllipticCoeffs, RDASpace, l2_error_elementwise
from .mesh import TriMesh
from .ocp import (Box, ControlField, ControlTransfer, IntegralLowerBound, LowerBound,
                  OcpSolution, ProblemSpec, Unconstrained, control_error)
from .quadrature import map_triangle, triangle_rule

BOUND_TOL = 1e-10

# sharp-mode partition labels
INACTIVE = 0        # strictly inside the bounds
ACTIVE = 1          # at a bound, sign condition fails
ACTIVE_SIGNED = 2   # at a bound with the matching gradient sign


def _samples(space, source, degree):
    vol = space.volume(degree)
    if source is None:
        return np.zeros(vol.weights.shape)
    if callable(source):
        return np.broadcast_to(np.asarray(source(vol.points), dtype=float), vol.weights.shape)
    source = np.asarray(source, dtype=float)
    if source.shape != vol.weights.shape:
        raise ValueError(f"source samples must have shape {vol.weights.shape}, got {source.shape}")
    return source


def eta_volume(field: DGField, source, coeffs: EllipticCoeffs | None = None, degree=None):
    """Per-element ``(h_K/mu)^2 |source + div(A grad field)|_{L2(K)}``.

    ``source`` is a callable or samples at the volume points of ``degree``
    (the space's error degree by default).
    """
    space = field.space
    coeffs = coeffs if coeffs is not None else EllipticCoeffs()
    degree = space.error_degree if degree is None else degree
    vol = space.volume(degree, order=2)
    grad = field.gradients(degree)
    hess = field.hessians(degree)
    res = _samples(space, source, degree) + coeffs.divergence(vol.points, grad, hess)
    norm = np.sqrt(np.sum(vol.weights * res * res, axis=1))
    ht = space.mesh.diameters / space.mu
    return ht ** 2 * norm


def eta_jumps(field: DGField, coeffs: EllipticCoeffs | None = None, boundary=None, degree=None):
    """Per-edge jump indicators ``(eta2, eta3)``.

    ``eta2`` covers every edge; on boundary edges the jump is the trace
    itself, minus ``boundary`` data if given.  ``eta3`` is the normal flux
    jump on interior edges and zero on boundary edges.
    """
    space = field.space
    coeffs = coeffs if coeffs is not None else EllipticCoeffs()
    degree = space.error_degree if degree is None else degree
    mesh = space.mesh
    tab = space.edges(degree)
    ee = mesh.edge_elements
    interior = ee[:, 1] >= 0
    k1 = np.where(interior, ee[:, 1], ee[:, 0])
    v0, g0 = field(ee[:, 0], tab.points, order=1)
    v1, g1 = field(k1, tab.points, order=1)
    jump = np.where(interior[:, None], v0 - v1, v0)
    if boundary is not None:
        bvals = np.asarray(boundary(tab.points), dtype=float)
        jump = np.where(interior[:, None], jump, jump - bvals)
    f0 = coeffs.flux(tab.points, g0[..., None, :])[..., 0, :]
    f1 = coeffs.flux(tab.points, g1[..., None, :])[..., 0, :]
    fjump = np.einsum("eqi,ei->eq", f0 - f1, tab.normals)
    fjump = np.where(interior[:, None], fjump, 0.0)
    he = tab.lengths / space.mu
    eta2 = np.sqrt(he) * np.sqrt(np.sum(tab.weights * jump ** 2, axis=1))
    eta3 = he ** 1.5 * np.sqrt(np.sum(tab.weights * fjump ** 2, axis=1))
    return eta2, eta3


def element_indicator(space: RDASpace, eta1, eta2, eta3):
    """``eta_K^2`` combining the element residual with all incident edge terms."""
    edge2 = eta2 ** 2 + eta3 ** 2
    return eta1 ** 2 + edge2[space.mesh.elem_edges].sum(axis=1)


# ---- control indicators ----------------------------------------------------

def _gradient_moments(sol: OcpSolution, spec: ProblemSpec, transfer: ControlTransfer,
                      degree: int, means=None):
    """Per-control-element integrals of ``g`` (and of ``(g - means)^2``) for the
    pointwise gradient ``g = j'(u_h) + c_B p_h``."""
    nu = transfer.control.n_elements
    first = np.zeros(nu)
    second = np.zeros(nu)
    u = sol.u.values
    for pts, w, s, c in transfer.chunks(degree):
        g = spec.j_prime(u[c][:, None] + 0 * w, pts) + spec.c_B * transfer.space.eval(sol.p.coef, s, pts)
        first += np.bincount(c, np.sum(w * g, axis=1), minlength=nu)
        if means is None:
            second += np.bincount(c, np.sum(w * g * g, axis=1), minlength=nu)
        else:
            d = g - means[c][:, None]
            second += np.bincount(c, np.sum(w * d * d, axis=1), minlength=nu)
    return first, second


def _bounds(constraint):
    if isinstance(constraint, LowerBound):
        return constraint.gamma, np.inf
    if isinstance(constraint, Box):
        return constraint.lower, constraint.upper
    raise ValueError(f"sharp indicator needs a LowerBound or Box constraint, got {constraint!r}")


def partition(u: ControlField, grad_means, constraint, tol=BOUND_TOL):
    """Label each control element INACTIVE, ACTIVE or ACTIVE_SIGNED."""
    lo, hi = _bounds(constraint)
    v = u.values
    at_lo = v <= lo + tol
    at_hi = v >= hi - tol
    labels = np.full(v.shape, INACTIVE, dtype=np.int8)
    labels[at_lo | at_hi] = ACTIVE
    signed = (at_lo & (grad_means >= 0)) | (at_hi & (grad_means <= 0))
    labels[signed] = ACTIVE_SIGNED
    return labels


def eta_control(sol: OcpSolution, spec: ProblemSpec, transfer: ControlTransfer,
                mode: str = "general", degree: int = 4):
    """Control indicator and per-element contributions.

    ``general``: ``|(I - Pi)(j'(u_h) + B^* p_h)|`` with the gradient sampled
    at quadrature points.  ``sharp``: ``|j'(u_h) + B^* p_h|`` over the
    elements outside the signed active set.  Returns
    ``(total, per_element, labels)``; ``labels`` is ``None`` in general mode.
    """
    if sol.u.mode != "piecewise_constant":
        raise ValueError("control indicators need a piecewise-constant control")
    areas = transfer.control.areas
    if mode == "general":
        first, _ = _gradient_moments(sol, spec, transfer, degree)
        _, dev = _gradient_moments(sol, spec, transfer, degree, means=first / areas)
        dev = np.maximum(dev, 0.0)
        return float(np.sqrt(dev.sum())), np.sqrt(dev), None
    if mode != "sharp":
        raise ValueError(f"unknown mode {mode!r}; expected 'general' or 'sharp'")
    if isinstance(spec.constraint, IntegralLowerBound):
        raise ValueError("sharp indicator is not defined for the integral constraint")
    labels = partition(sol.u, sol.gradient, spec.constraint)
    _, sq = _gradient_moments(sol, spec, transfer, degree)
    sq = np.where(labels == ACTIVE_SIGNED, 0.0, sq)
    return float(np.sqrt(sq.sum())), np.sqrt(sq), labels


# ---- Z-Z recovery ----------------------------------------------------------

@dataclass
class RecoveredControl:
    """Continuous piecewise-linear control given by its nodal values."""
    mesh: TriMesh
    values: np.ndarray
    fallback_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __call__(self, elems, points):
        """Evaluate at ``points`` (k, nq, 2) lying in elements ``elems`` (k,)."""
        c = self.mesh.corners(elems)
        v0 = c[:, None, 0]
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        r = points - v0
        l1 = (r[..., 0] * d2[:, None, 1] - r[..., 1] * d2[:, None, 0]) / det[:, None]
        l2 = (d1[:, None, 0] * r[..., 1] - d1[:, None, 1] * r[..., 0]) / det[:, None]
        nv = self.values[self.mesh.elements[elems]]
        return (nv[:, None, 0] * (1 - l1 - l2) + nv[:, None, 1] * l1 + nv[:, None, 2] * l2)

    def l2_error(self, exact, degree=4, chunk=200_000) -> float:
        rule = triangle_rule(degree)
        total = 0.0
        ne = self.mesh.n_elements
        for start in range(0, ne, chunk):
            ids = np.arange(start, min(start + chunk, ne))
            pts, w = map_triangle(rule, self.mesh.corners(ids))
            total += float(np.sum(w * (exact(pts) - self(ids, pts)) ** 2))
        return float(np.sqrt(total))


def _normal_system(mesh, node, elems, u):
    """Area-weighted normal equations around ``node`` in shifted, scaled coordinates."""
    z = mesh.vertices[node]
    scale = mesh.diameters[elems].max()
    d = (mesh.barycenters[elems] - z) / scale
    X = np.column_stack([np.ones(len(elems)), d])
    a = mesh.areas[elems]
    return X.T @ (a[:, None] * X), X.T @ (a * u[elems])


def _singular(N, rtol=1e-12):
    ev = np.linalg.eigvalsh(N)
    return ev[..., 0] <= rtol * ev[..., -1]


def zz_recover(u: ControlField, mesh: TriMesh | None = None) -> RecoveredControl:
    """Nodal values from the area-weighted linear fit to the adjacent element means.

    Nodes whose system is singular (too few adjacent elements, such as some
    corners) are refitted on the second ring: every element sharing a
    vertex with the first-ring elements.
    """
    mesh = mesh if mesh is not None else u.mesh
    vals = np.asarray(u.values, dtype=float)
    if vals.shape != (mesh.n_elements,):
        raise ValueError("zz_recover needs one value per control element")
    nv = mesh.n_vertices
    node = mesh.elements.ravel()
    elem = np.repeat(np.arange(mesh.n_elements), 3)
    # the local fit is invariant under shifting and scaling of coordinates;
    # shift by the node and scale by the local diameter for conditioning
    scale = np.zeros(nv)
    np.maximum.at(scale, node, mesh.diameters[elem])
    d = (mesh.barycenters[elem] - mesh.vertices[node]) / scale[node][:, None]
    X = np.column_stack([np.ones(len(elem)), d])
    a = mesh.areas[elem]
    N = np.zeros((nv, 3, 3))
    b = np.zeros((nv, 3))
    for i in range(3):
        b[:, i] = np.bincount(node, a * vals[elem] * X[:, i], minlength=nv)
        for j in range(3):
            N[:, i, j] = np.bincount(node, a * X[:, i] * X[:, j], minlength=nv)
    bad = _singular(N)
    N_ok = N[~bad]
    coef = np.linalg.solve(N_ok, b[~bad][..., None])[..., 0]
    out = np.empty(nv)
    out[~bad] = coef[:, 0]
    fallback = np.flatnonzero(bad)
    vertex_elems = mesh.vertex_elements if len(fallback) else None
    for z in fallback:
        ring1 = vertex_elems[z]
        ring2 = np.unique(np.concatenate([vertex_elems[v] for v in np.unique(mesh.elements[ring1])]))
        Nz, bz = _normal_system(mesh, z, ring2, vals)
        if _singular(Nz):
            raise np.linalg.LinAlgError(f"recovery patch of node {z} is degenerate")
        out[z] = np.linalg.solve(Nz, bz)[0]
    return RecoveredControl(mesh, out, fallback)


# ---- reports and effectivity -----------------------------------------------

@dataclass
class IndicatorReport:
    eta1_y: np.ndarray
    eta1_p: np.ndarray
    eta2_y: np.ndarray
    eta3_y: np.ndarray
    eta2_p: np.ndarray
    eta3_p: np.ndarray
    eta0: float
    eta0_per_element: np.ndarray
    eta0_sharp: Optional[float] = None
    eta0_sharp_per_element: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    @property
    def total_y(self) -> float:
        return float(np.sqrt(np.sum(self.eta1_y ** 2) + np.sum(self.eta2_y ** 2)
                             + np.sum(self.eta3_y ** 2)))

    @property
    def total_p(self) -> float:
        return float(np.sqrt(np.sum(self.eta1_p ** 2) + np.sum(self.eta2_p ** 2)
                             + np.sum(self.eta3_p ** 2)))

    @property
    def total(self) -> float:
        """Root-sum-square of every contribution (general control indicator)."""
        return float(np.sqrt(self.eta0 ** 2 + self.total_y ** 2 + self.total_p ** 2))


def control_samples(u: ControlField, points):
    """Evaluate a piecewise-constant control at arbitrary points."""
    return u.values[u.mesh.locate(points)]


def state_residual_source(sol: OcpSolution, spec: ProblemSpec):
    """Samples of ``f + B u_h`` at the error-degree volume points of the state space."""
    space = sol.y.space
    pts = space.volume(space.error_degree).points
    f = spec.coeffs.source(pts) if spec.coeffs.source is not None else 0.0
    if sol.u.mode == "sampled":
        raise ValueError("indicators are defined for piecewise-constant controls")
    return f + spec.c_B * control_samples(sol.u, pts)


def indicators(sol: OcpSolution, spec: ProblemSpec, transfer: ControlTransfer | None = None,
               sharp: bool | None = None) -> IndicatorReport:
    """All indicators of a converged solution with a piecewise-constant control."""
    space = sol.y.space
    if transfer is None:
        transfer = ControlTransfer(space, sol.u.mesh, spec.c_B)
    coeffs = spec.coeffs
    deg = space.error_degree
    eta1_y = eta_volume(sol.y, state_residual_source(sol, spec), coeffs)
    gp = spec.g_prime(sol.y.values(deg), space.volume(deg).points)
    eta1_p = eta_volume(sol.p, gp, coeffs)
    eta2_y, eta3_y = eta_jumps(sol.y, coeffs, boundary=coeffs.boundary)
    eta2_p, eta3_p = eta_jumps(sol.p, coeffs)
    eta0, eta0_el, _ = eta_control(sol, spec, transfer, "general")
    if sharp is None:
        sharp = isinstance(spec.constraint, (LowerBound, Box))
    rep = IndicatorReport(eta1_y, eta1_p, eta2_y, eta3_y, eta2_p, eta3_p, eta0, eta0_el)
    if sharp:
        rep.eta0_sharp, rep.eta0_sharp_per_element, rep.labels = eta_control(
            sol, spec, transfer, "sharp")
    return rep


def _ratio(num2, den2):
    num2 = np.asarray(num2, dtype=float)
    den2 = np.asarray(den2, dtype=float)
    out = np.zeros(np.broadcast(num2, den2).shape)
    nz = den2 > 0
    out[nz] = np.sqrt(num2[nz] / den2[nz])
    return out


@dataclass
class Effectivity:
    e_y: np.ndarray     # per state element
    e_p: np.ndarray     # per state element
    e_u: np.ndarray     # per control element


def effectivity(report: IndicatorReport, sol: OcpSolution, spec: ProblemSpec,
                transfer: ControlTransfer | None = None, degree: int = 4) -> Effectivity:
    """Ratios of local indicators to local errors; zero where the error vanishes."""
    if spec.exact is None:
        raise ValueError("effectivity ratios need the exact solution")
    space = sol.y.space
    if transfer is None:
        transfer = ControlTransfer(space, sol.u.mesh, spec.c_B)
    ey2 = l2_error_elementwise(space, sol.y, spec.exact.y)
    ep2 = l2_error_elementwise(space, sol.p, spec.exact.p)
    eta_y2 = element_indicator(space, report.eta1_y, report.eta2_y, report.eta3_y)
    eta_p2 = element_indicator(space, report.eta1_p, report.eta2_p, report.eta3_p)
    _, gsq = _gradient_moments(sol, spec, transfer, degree)
    eu2 = control_error(sol.u, spec.exact.u, degree=degree, elementwise=True)
    return Effectivity(_ratio(eta_y2, ey2), _ratio(eta_p2, ep2), _ratio(gsq, eu2))
