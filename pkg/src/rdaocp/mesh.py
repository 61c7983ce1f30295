"""Conforming triangulations of axis-aligned rectangles.

Meshes are built from an ``n x n`` grid of squares, each split along its
lower-left to upper-right diagonal.  Vertex and element numbering is
row-major, so every quantity derived from a mesh is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Rectangle:
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise MeshError(f"degenerate rectangle {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


UNIT_SQUARE = Rectangle()


class TriMesh:
    """Triangle mesh with lazily built edge and adjacency tables.

    Parameters
    ----------
    vertices : (nv, 2) array
    elements : (ne, 3) int array, counter-clockwise
    grid : tuple (n, Rectangle), optional
        Set for meshes produced by :func:`build_uniform`; enables O(1)
        point location.

    The arrays are marked read-only; derived tables are cached on first use.
    """

    def __init__(self, vertices, elements, grid=None):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        elements = np.ascontiguousarray(elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError("elements must have shape (ne, 3)")
        vertices.flags.writeable = False
        elements.flags.writeable = False
        self.vertices = vertices
        self.elements = elements
        self.grid = grid

        p = vertices[elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(area <= 0):
            raise MeshError("elements must have positive area and CCW orientation")
        self.areas = area
        self.barycenters = p.mean(axis=1)
        lengths = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
        self.diameters = lengths.max(axis=1)
        for a in (self.areas, self.barycenters, self.diameters):
            a.flags.writeable = False

    def __repr__(self):
        return f"TriMesh(nv={self.n_vertices}, ne={self.n_elements})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def h(self) -> float:
        """Mesh size, the largest element diameter."""
        return float(self.diameters.max())

    def corners(self, ids=None):
        """Vertex coordinates of elements ``ids`` as an (k, 3, 2) array."""
        if ids is None:
            return self.vertices[self.elements]
        return self.vertices[self.elements[ids]]

    # ---- edges ---------------------------------------------------------

    @cached_property
    def _edge_tables(self):
        el = self.elements
        ne = len(el)
        # local edge l joins local vertices l and l+1
        a = el
        b = el[:, [1, 2, 0]]
        pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=-1).reshape(-1, 2)
        keys = pairs[:, 0] * self.n_vertices + pairs[:, 1]
        uniq, first, inverse, counts = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: an edge is shared by more than 2 elements")
        n_edges = len(uniq)
        edge_vertices = pairs[first]

        edge_elements = np.full((n_edges, 2), -1, dtype=np.int64)
        edge_local = np.full((n_edges, 2), -1, dtype=np.int64)
        owner = np.repeat(np.arange(ne), 3)
        local = np.tile(np.arange(3), ne)
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        starts = np.searchsorted(inv_sorted, np.arange(n_edges))
        edge_elements[:, 0] = owner[order[starts]]
        edge_local[:, 0] = local[order[starts]]
        two = counts == 2
        second = order[starts[two] + 1]
        edge_elements[two, 1] = owner[second]
        edge_local[two, 1] = local[second]

        elem_edges = inverse.reshape(ne, 3)

        # outward normal of the first adjacent element
        k0 = edge_elements[:, 0]
        l0 = edge_local[:, 0]
        va = self.vertices[el[k0, l0]]
        vb = self.vertices[el[k0, (l0 + 1) % 3]]
        d = vb - va
        lengths = np.linalg.norm(d, axis=1)
        normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / lengths[:, None]
        return dict(edge_vertices=edge_vertices, edge_elements=edge_elements,
                    edge_local=edge_local, elem_edges=elem_edges,
                    edge_lengths=lengths, edge_normals=normals)

    @property
    def edge_vertices(self):
        return self._edge_tables["edge_vertices"]

    @property
    def edge_elements(self):
        """(n_edges, 2) adjacent elements; column 1 is -1 on the boundary."""
        return self._edge_tables["edge_elements"]

    @property
    def edge_local(self):
        return self._edge_tables["edge_local"]

    @property
    def elem_edges(self):
        return self._edge_tables["elem_edges"]

    @property
    def edge_lengths(self):
        return self._edge_tables["edge_lengths"]

    @property
    def edge_normals(self):
        """Unit normals pointing out of ``edge_elements[:, 0]``."""
        return self._edge_tables["edge_normals"]

    @property
    def n_edges(self) -> int:
        return len(self.edge_vertices)

    @cached_property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_elements[:, 1] < 0)

    @cached_property
    def interior_edges(self):
        return np.flatnonzero(self.edge_elements[:, 1] >= 0)

    @cached_property
    def neighbors(self):
        """(ne, 3) face neighbours across local edges, -1 on the boundary."""
        ee = self.edge_elements[self.elem_edges]
        own = np.arange(self.n_elements)[:, None]
        return np.where(ee[..., 0] == own, ee[..., 1], ee[..., 0])

    @cached_property
    def vertex_elements(self):
        """List of element-id arrays incident to each vertex."""
        flat = self.elements.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(self.n_vertices + 1))
        owners = order // 3
        return [owners[bounds[i]:bounds[i + 1]] for i in range(self.n_vertices)]

    # ---- quality -------------------------------------------------------

    @cached_property
    def min_angle(self) -> float:
        """Smallest interior angle over all elements (radians), K_0."""
        p = self.corners()
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            c = np.einsum("ij,ij->i", u, v) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return float(np.min(angles))

    @cached_property
    def grade_constant(self) -> float:
        """K_1 = max over elements K and edges e of K of h_K / h_e."""
        he = self.edge_lengths[self.elem_edges]
        return float(np.max(self.diameters[:, None] / he))

    # ---- queries -------------------------------------------------------

    def face_neighbors(self, k: int) -> set:
        """Element ``k`` together with every element sharing an edge with it."""
        if not 0 <= k < self.n_elements:
            raise IndexError(f"element id {k} out of range")
        nb = self.neighbors[k]
        return {int(k)} | {int(j) for j in nb if j >= 0}

    def locate(self, points) -> np.ndarray:
        """Element index containing each point (points on shared edges may go either way)."""
        points = np.asarray(points, dtype=float)
        if self.grid is not None:
            n, rect = self.grid
            hx = (rect.x1 - rect.x0) / n
            hy = (rect.y1 - rect.y0) / n
            s = (points[..., 0] - rect.x0) / hx
            t = (points[..., 1] - rect.y0) / hy
            i = np.clip(np.floor(s).astype(np.int64), 0, n - 1)
            j = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
            upper = (t - j) > (s - i)
            return 2 * (j * n + i) + upper
        return self._locate_generic(points)

    def _locate_generic(self, points):
        pts = points.reshape(-1, 2)
        out = np.full(len(pts), -1, dtype=np.int64)
        p = self.corners()
        lo = p.min(axis=1)
        hi = p.max(axis=1)
        nb = max(1, int(np.sqrt(self.n_elements)))
        box_lo = self.vertices.min(axis=0)
        span = np.maximum(self.vertices.max(axis=0) - box_lo, 1e-300)
        cell = lambda x: np.clip(((x - box_lo) / span * nb).astype(np.int64), 0, nb - 1)
        clo, chi = cell(lo), cell(hi)
        buckets = {}
        for k in range(self.n_elements):
            for bi in range(clo[k, 0], chi[k, 0] + 1):
                for bj in range(clo[k, 1], chi[k, 1] + 1):
                    buckets.setdefault((bi, bj), []).append(k)
        cq = cell(pts)
        for idx, (bi, bj) in enumerate(cq):
            for k in buckets.get((bi, bj), ()):
                lam = _barycentric(p[k], pts[idx])
                if lam.min() >= -1e-12:
                    out[idx] = k
                    break
        if np.any(out < 0):
            raise MeshError("point outside mesh")
        return out.reshape(points.shape[:-1])

    def dump(self, path) -> None:
        """Write a plain-text node/element listing."""
        with open(path, "w") as fh:
            fh.write(f"# nodes {self.n_vertices}\n")
            for i, (x, y) in enumerate(self.vertices):
                fh.write(f"{i} {x:.17g} {y:.17g}\n")
            fh.write(f"# elements {self.n_elements}\n")
            for i, (a, b, c) in enumerate(self.elements):
                fh.write(f"{i} {a} {b} {c}\n")


def _barycentric(tri, x):
    t = np.array([[tri[1, 0] - tri[0, 0], tri[2, 0] - tri[0, 0]],
                  [tri[1, 1] - tri[0, 1], tri[2, 1] - tri[0, 1]]])
    l12 = np.linalg.solve(t, x - tri[0])
    return np.array([1 - l12.sum(), l12[0], l12[1]])


def build_uniform(n: int, domain: Rectangle = UNIT_SQUARE) -> TriMesh:
    """Uniform ``n x n`` grid of squares, each cut by its rising diagonal."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise MeshError(f"n must be a positive integer, got {n!r}")
    if not isinstance(domain, Rectangle):
        raise MeshError("only axis-aligned rectangles are supported")
    n = int(n)
    xs = np.linspace(domain.x0, domain.x1, n + 1)
    ys = np.linspace(domain.y0, domain.y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.divmod(np.arange(n * n), n)
    ll = j * (n + 1) + i
    lr = ll + 1
    ul = ll + n + 1
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return TriMesh(vertices, elements, grid=(n, domain))


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Red refinement: split every triangle into four through its edge midpoints."""
    nv = mesh.n_vertices
    mid = nv + mesh.elem_edges          # midpoint vertex of local edge l
    ev = mesh.edge_vertices
    midpoints = 0.5 * (mesh.vertices[ev[:, 0]] + mesh.vertices[ev[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    v = mesh.elements
    m01, m12, m20 = mid[:, 0], mid[:, 1], mid[:, 2]
    children = np.stack([
        np.column_stack([v[:, 0], m01, m20]),
        np.column_stack([m01, v[:, 1], m12]),
        np.column_stack([m20, m12, v[:, 2]]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    return TriMesh(vertices, children)


def nested(coarse: TriMesh, fine: TriMesh) -> np.ndarray:
    """Parent element in ``coarse`` of every element of ``fine``.

    Raises :class:`MeshError` if some fine element is not contained in a
    single coarse element.
    """
    if coarse.grid is not None and fine.grid is not None:
        nc, rc = coarse.grid
        nf, rf = fine.grid
        if rc != rf or nf % nc != 0:
            raise MeshError(
                f"meshes are not nested: n={nf} is not a multiple of n={nc}")
    parent = coarse.locate(fine.barycenters)
    if coarse.grid is None or fine.grid is None:
        tri = coarse.corners(parent)
        for c in range(3):
            pts = fine.vertices[fine.elements[:, c]]
            lam = _batch_barycentric(tri, pts)
            if lam.min() < -1e-10:
                raise MeshError("meshes are not nested")
    return parent


def _batch_barycentric(tri, pts):
    d1 = tri[:, 1] - tri[:, 0]
    d2 = tri[:, 2] - tri[:, 0]
    r = pts - tri[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=1)
