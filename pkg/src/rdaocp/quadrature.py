"""Quadrature rules and scaled monomial bases on triangles."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 20


@dataclass(frozen=True)
class QuadRule:
    """Points and weights on a reference cell.

    Triangle rules live on the reference triangle (0,0), (1,0), (0,1) with
    weights summing to 1/2; edge rules live on [0, 1] with weights summing
    to 1.
    """
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


def _orbit(*bary):
    return sorted(set(permutations(bary)))


# Symmetric rules (Dunavant); entries are (barycentric orbit generator, weight).
_SYMMETRIC = {
    1: [((1 / 3, 1 / 3, 1 / 3), 1.0)],
    2: [((2 / 3, 1 / 6, 1 / 6), 1 / 3)],
    3: [((0.659027622374092, 0.231933368553031, 0.109039009072877), 1 / 6)],
    4: [((0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011),
        ((0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322)],
    5: [((1 / 3, 1 / 3, 1 / 3), 0.225),
        ((0.059715871789770, 0.470142064105115, 0.470142064105115), 0.132394152788506),
        ((0.797426985353087, 0.101286507323456, 0.101286507323456), 0.125939180544827)],
    6: [((0.501426509658179, 0.249286745170910, 0.249286745170910), 0.116786275726379),
        ((0.873821971016996, 0.063089014491502, 0.063089014491502), 0.050844906370207),
        ((0.053145049844817, 0.310352451033784, 0.636502499121399), 0.082851075618374)],
}


def _symmetric_rule(degree):
    pts, wts = [], []
    for gen, w in _SYMMETRIC[degree]:
        orbit = _orbit(*gen)
        for b in orbit:
            pts.append(b)
            wts.append(w)
    bary = np.array(pts)
    w = np.array(wts)
    w = w / w.sum()
    bary = bary / bary.sum(axis=1, keepdims=True)
    return bary[:, 1:], 0.5 * w


def _conical_rule(degree):
    # collapsed Gauss-Jacobi x Gauss-Legendre product rule
    n = (degree + 2) // 2
    tj, wj = roots_jacobi(n, 1.0, 0.0)     # weight (1 - t) on [-1, 1]
    sg, wg = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (tj + 1.0)
    s = 0.5 * (sg + 1.0)
    T, S = np.meshgrid(t, s, indexing="ij")
    WT, WS = np.meshgrid(wj / 4.0, wg / 2.0, indexing="ij")
    x = S * (1.0 - T)
    y = T
    return np.column_stack([x.ravel(), y.ravel()]), (WT * WS).ravel()


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadRule:
    """Rule on the reference triangle exact for polynomials of total degree ``degree``."""
    if not isinstance(degree, (int, np.integer)) or not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"triangle rule degree must be in [0, {MAX_DEGREE}], got {degree!r}")
    d = max(int(degree), 1)
    if d in _SYMMETRIC:
        pts, w = _symmetric_rule(d)
    else:
        pts, w = _conical_rule(d)
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadRule(pts, w, int(degree))


@lru_cache(maxsize=None)
def edge_rule(degree: int) -> QuadRule:
    """Gauss-Legendre rule on [0, 1] exact to ``degree``."""
    if not isinstance(degree, (int, np.integer)) or not 0 <= degree <= 2 * MAX_DEGREE:
        raise ValueError(f"edge rule degree must be in [0, {2 * MAX_DEGREE}], got {degree!r}")
    n = int(degree) // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n)
    pts = 0.5 * (x + 1.0)
    w = 0.5 * w
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadRule(pts, w, int(degree))


def map_triangle(rule: QuadRule, corners):
    """Map a reference rule onto triangles.

    ``corners`` is (k, 3, 2).  Returns physical points (k, nq, 2) and
    weights (k, nq) that integrate over each triangle.
    """
    corners = np.asarray(corners, dtype=float)
    v0 = corners[:, 0]
    d1 = corners[:, 1] - v0
    d2 = corners[:, 2] - v0
    xi = rule.points[:, 0]
    eta = rule.points[:, 1]
    pts = (v0[:, None, :] + xi[None, :, None] * d1[:, None, :]
           + eta[None, :, None] * d2[:, None, :])
    jac = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    return pts, jac[:, None] * rule.weights[None, :]


# ---- scaled monomial basis -----------------------------------------------

def basis_dim(m: int) -> int:
    return (m + 1) * (m + 2) // 2


@lru_cache(maxsize=None)
def exponents(m: int) -> tuple:
    """Graded lexicographic exponents (a, b) for x^a y^b, |a+b| <= m."""
    return tuple((k - b, b) for k in range(m + 1) for b in range(k + 1))


@dataclass(frozen=True)
class LocalBasis:
    """Monomials ((x - center) / scale)^alpha of degree <= m on one element."""
    m: int
    center: tuple
    scale: float
    element: int = -1

    @property
    def dim(self) -> int:
        return basis_dim(self.m)


def monomials(m, s, t, order=0):
    """Monomials in scaled coordinates ``(s, t)`` and their derivatives.

    Returns ``[values]`` for order 0, plus gradients ``(..., dim, 2)`` for
    order >= 1 and Hessians ``(..., dim, 2, 2)`` for order 2.  Derivatives
    are with respect to the scaled coordinates.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order!r}")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    exps = exponents(m)
    sp = [np.ones_like(s)]
    tp = [np.ones_like(t)]
    for _ in range(m):
        sp.append(sp[-1] * s)
        tp.append(tp[-1] * t)
    zero = np.zeros_like(s)
    pw = lambda P, k: P[k] if k >= 0 else zero
    vals = np.stack([sp[a] * tp[b] for a, b in exps], axis=-1)
    out = [vals]
    if order >= 1:
        gs = np.stack([a * pw(sp, a - 1) * tp[b] for a, b in exps], axis=-1)
        gt = np.stack([b * sp[a] * pw(tp, b - 1) for a, b in exps], axis=-1)
        out.append(np.stack([gs, gt], axis=-1))
    if order == 2:
        hss = np.stack([a * (a - 1) * pw(sp, a - 2) * tp[b] for a, b in exps], axis=-1)
        hst = np.stack([a * b * pw(sp, a - 1) * pw(tp, b - 1) for a, b in exps], axis=-1)
        htt = np.stack([b * (b - 1) * sp[a] * pw(tp, b - 2) for a, b in exps], axis=-1)
        out.append(np.stack([np.stack([hss, hst], -1), np.stack([hst, htt], -1)], -2))
    return out


def eval_basis(basis: LocalBasis, points, order=0):
    """Values, physical gradients and Hessians of a :class:`LocalBasis`."""
    points = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    h = basis.scale
    s = (points[..., 0] - basis.center[0]) / h
    t = (points[..., 1] - basis.center[1]) / h
    res = monomials(basis.m, s, t, order)
    if order >= 1:
        res[1] = res[1] / h
    if order == 2:
        res[2] = res[2] / h ** 2
    return res if order else res[0]
