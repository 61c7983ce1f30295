"""Patch-wise least-squares reconstruction of piecewise constants.

Each element ``K`` gets a patch ``S(K)`` of edge-connected neighbours.  A
polynomial of degree ``m`` is fitted to the element values at the patch
barycenters, with the value at ``x_K`` held fixed, and restricted to ``K``.
The map is linear, so it is stored as one sparse matrix ``R`` taking the
one-value-per-element vector to per-element monomial coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh
from .quadrature import basis_dim, exponents, monomials

RANK_RTOL = 1e-10
MAX_ENLARGE = 2


class ReconstructionError(RuntimeError):
    pass


def patch_threshold(m: int, d: int = 2) -> int:
    """Minimum patch cardinality ``ceil((d+1)/2 * dim P_m)``."""
    if m < 1:
        raise ValueError("reconstruction degree must be at least 1")
    dim = math.comb(m + d, d)
    return math.ceil((d + 1) * dim / 2)


@dataclass
class ElementPatch:
    owner: int
    elements: list
    depth: int

    def __len__(self):
        return len(self.elements)


def build_patch(mesh: TriMesh, k: int, threshold: int, extra_levels: int = 0) -> ElementPatch:
    """Grow face-neighbour layers around ``k`` until the patch holds ``threshold`` elements.

    ``extra_levels`` adds that many further layers after the threshold is met.
    Elements are ordered by layer, then by id.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    nb = mesh.neighbors
    members = [int(k)]
    seen = {int(k)}
    frontier = [int(k)]
    depth = 0
    remaining = extra_levels
    while len(members) < threshold or remaining > 0:
        if len(members) >= threshold:
            remaining -= 1
        new = sorted({int(j) for e in frontier for j in nb[e] if j >= 0} - seen)
        if not new:
            if len(members) < threshold:
                raise ReconstructionError(
                    f"patch of element {k} saturates at {len(members)} elements, "
                    f"below the threshold {threshold}; use a mesh with at least "
                    f"{threshold} elements")
            break
        members.extend(new)
        seen.update(new)
        frontier = new
        depth += 1
    return ElementPatch(int(k), members, depth)


def _local_design(mesh, k, members, m):
    """Monomial design matrix in coordinates scaled by the patch radius."""
    xk = mesh.barycenters[k]
    d = mesh.barycenters[members] - xk
    radius = np.max(np.linalg.norm(d, axis=1))
    if radius == 0:
        radius = mesh.diameters[k]
    vals = monomials(m, d[:, 0] / radius, d[:, 1] / radius)[0]
    return vals[:, 1:], radius


def _local_operator(mesh, k, members, m):
    """Matrix Q with coefficients = Q @ w[members] in the h_K-scaled basis.

    Also returns the singular values of the reduced design matrix.
    """
    design, radius = _local_design(mesh, k, members, m)
    U, s, Vt = np.linalg.svd(design, full_matrices=False)
    if s.size == 0 or s[-1] <= RANK_RTOL * s[0]:
        return None, s
    pinv = (Vt.T / s) @ U.T                      # (dim-1, |S|)
    own = members.index(k)
    Q = np.zeros((basis_dim(m), len(members)))
    Q[0, own] = 1.0
    Q[1:] = pinv
    Q[1:, own] -= pinv.sum(axis=1)
    deg = np.array([a + b for a, b in exponents(m)])
    Q *= (mesh.diameters[k] / radius) ** deg[:, None]
    return Q, s


def solve_local_ls(mesh: TriMesh, patch: ElementPatch, samples, m: int) -> np.ndarray:
    """Constrained least-squares fit on one patch.

    ``samples`` holds one value per mesh element (only patch entries are
    read).  Returns the coefficients of the fitted polynomial in the basis
    ``((x - x_K) / h_K)^alpha`` of the owner element.
    """
    samples = np.asarray(samples, dtype=float)
    Q, s = _local_operator(mesh, patch.owner, patch.elements, m)
    if Q is None:
        raise ReconstructionError(
            f"rank-deficient least-squares problem on element {patch.owner}: "
            f"singular values {s}")
    return Q @ samples[patch.elements]


@dataclass
class ReconstructionMatrix:
    """Sparse reconstruction operator.

    ``matrix`` has shape ``(n_elements * dim, n_elements)``; rows
    ``K*dim : (K+1)*dim`` hold the coefficients on element ``K``.
    """
    matrix: sp.csr_matrix
    m: int
    patches: list = field(repr=False)

    @property
    def dim(self) -> int:
        return basis_dim(self.m)

    @property
    def n_elements(self) -> int:
        return self.matrix.shape[1]

    def apply(self, w) -> np.ndarray:
        """Per-element coefficient array ``(n_elements, dim)``."""
        return (self.matrix @ np.asarray(w, dtype=float)).reshape(-1, self.dim)


def assemble_reconstruction(mesh: TriMesh, m: int, threshold: int | None = None) -> ReconstructionMatrix:
    """Assemble the global reconstruction operator for degree ``m``."""
    if threshold is None:
        threshold = patch_threshold(m)
    dim = basis_dim(m)
    ne = mesh.n_elements
    rows, cols, vals = [], [], []
    patches = []
    # Elements with congruent patches share the same local operator; cache on
    # the barycenter offsets to skip repeated SVDs on structured meshes.
    cache = {}
    for k in range(ne):
        for extra in range(MAX_ENLARGE + 1):
            patch = build_patch(mesh, k, threshold, extra_levels=extra)
            off = mesh.barycenters[patch.elements] - mesh.barycenters[k]
            key = (np.round(off / mesh.diameters[k], 12).tobytes(),
                   patch.elements.index(k), round(float(mesh.diameters[k]), 14))
            hit = cache.get(key)
            if hit is None:
                Q, s = _local_operator(mesh, k, patch.elements, m)
                if Q is not None:
                    cache[key] = Q
            else:
                Q = hit
            if Q is not None:
                break
        else:
            raise ReconstructionError(
                f"rank-deficient least-squares problem on element {k} after "
                f"{MAX_ENLARGE} patch enlargements: singular values {s}")
        patches.append(patch)
        r, c = np.meshgrid(k * dim + np.arange(dim), patch.elements, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(Q.ravel())
    R = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ne * dim, ne))
    R.sum_duplicates()
    R.eliminate_zeros()
    return ReconstructionMatrix(R, m, patches)
