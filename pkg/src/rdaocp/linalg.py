"""Sparse symmetric positive definite solves.

The direct path uses SuperLU in symmetric mode with a minimum-degree
ordering on ``A + A^T`` and no pivoting, which is an LDL^T-style
factorization: a non-positive pivot means ``A`` is not positive definite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class NotSPDError(np.linalg.LinAlgError):
    """Matrix is not symmetric positive definite."""


@dataclass
class SolveStats:
    method: str
    iterations: int
    residual: float
    fill: int = 0


def as_sparse(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def check_symmetric(A, rtol=1e-10):
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    scale = abs(A).max() if A.nnz else 0.0
    asym = abs(A - A.T).max() if A.nnz else 0.0
    if asym > rtol * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric: max |A - A^T| = {asym:.3e}")


class SPDFactor:
    """Reusable factorization of a sparse SPD matrix."""

    def __init__(self, A):
        A = as_sparse(A)
        check_symmetric(A)
        self.A = A
        lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        pivots = lu.U.diagonal()
        if not np.array_equal(lu.perm_r, lu.perm_c) or np.any(pivots <= 0):
            bad = int(np.sum(pivots <= 0))
            raise NotSPDError(
                f"matrix is not positive definite ({bad} non-positive pivots, "
                f"min pivot {pivots.min():.3e}); the penalty parameter may be too small")
        self._lu = lu
        self.fill = int(lu.L.nnz + lu.U.nnz)

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def spd_solve(A, b, tol=1e-12, prefer="direct", factor=None):
    """Solve ``A x = b`` for sparse SPD ``A``.

    Returns ``(x, SolveStats)``.  ``prefer`` is ``"direct"`` or
    ``"iterative"`` (Jacobi-preconditioned conjugate gradients).
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if prefer == "direct":
        if factor is None:
            factor = SPDFactor(A)
        A = factor.A
        x = factor.solve(b)
        res = np.linalg.norm(A @ x - b) / bnorm if bnorm else np.linalg.norm(x)
        return x, SolveStats("direct", 0, float(res), factor.fill)
    if prefer != "iterative":
        raise ValueError(f"unknown solver preference {prefer!r}")
    A = as_sparse(A)
    check_symmetric(A)
    if bnorm == 0:
        return np.zeros_like(b), SolveStats("iterative", 0, 0.0)
    d = A.diagonal()
    if np.any(d <= 0):
        raise NotSPDError("non-positive diagonal entry; matrix is not positive definite")
    x, count = _pcg(A, b, 1.0 / d, tol, 10 * A.shape[0])
    res = np.linalg.norm(A @ x - b) / bnorm
    if res > tol * 10:
        raise NotSPDError(f"conjugate gradients did not converge (residual {res:.3e})")
    return x, SolveStats("iterative", count, float(res))


def _pcg(A, b, dinv, tol, maxiter):
    """Jacobi-preconditioned CG that stops on non-positive curvature."""
    x = np.zeros_like(b)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    target = tol * np.linalg.norm(b)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0:
            raise NotSPDError(f"non-positive curvature {curv:.3e} at CG iteration {it}; "
                              "matrix is not positive definite")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return x, it
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


def matmul(A, B):
    """Sparse product ``A B``."""
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, B {B.shape}")
    return as_sparse(sp.csr_matrix(A) @ sp.csr_matrix(B))


def transpose_matmul(A, B):
    """Sparse product ``A^T B``."""
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"shape mismatch: A^T {A.shape[::-1]}, B {B.shape}")
    return as_sparse(sp.csr_matrix(A).T @ sp.csr_matrix(B))


def triple_product(R, A):
    """``R^T A R`` with sorted, duplicate-free output."""
    if A.shape[0] != A.shape[1] or A.shape[1] != R.shape[0]:
        raise ValueError(f"shape mismatch: R {R.shape}, A {A.shape}")
    R = sp.csr_matrix(R)
    out = (R.T @ (sp.csr_matrix(A) @ R)).tocsr()
    return as_sparse(out)
