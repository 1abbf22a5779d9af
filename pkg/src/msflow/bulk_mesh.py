"""Adaptive conforming triangulations of the square domain.

The chemical potentials live on a P1 triangulation of (-4, 4)^2 that is
independent of the moving curves.  Triangles are refined by edge bisection
with recursive closure: every triangle stores a refinement edge (the edge
opposite its first vertex, always its longest edge for the right-isosceles
family generated here), and a triangle may only be bisected once its
neighbour across that edge shares it, which keeps the mesh conforming
without hanging-node bookkeeping.

Adaptation is rebuild-based: ``adapt`` regenerates the mesh from the
coarse grid and bisects until every triangle near the curves is fine, so
coarsening away from the curves is implicit and repeated calls with the
same curves are idempotent.  Fields are carried over by nodal
interpolation, which is exact for functions representable on both meshes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "BulkMesh",
    "BoundarySpec",
    "build_initial",
    "adapt",
    "AdaptParams",
    "assemble_stiffness",
    "transfer_nodal",
    "dirichlet_apply",
]

DOMAIN_LO = -4.0
DOMAIN_HI = 4.0
DOMAIN_AREA = (DOMAIN_HI - DOMAIN_LO) ** 2
_GEOM_TOL = 1e-12


class BulkMesh:
    """Triangulation of the closed square, bisection-refinable.

    ``triangles[t] = (peak, a, b)`` with refinement edge (a, b).  Vertices
    are appended as bisection creates edge midpoints, so vertex indices of
    the coarse grid are stable under refinement.
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self._grid = None

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def diameters(self) -> np.ndarray:
        """Longest edge length per triangle."""
        p = self.vertices[self.triangles]
        e = np.stack(
            [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1
        )
        return np.sqrt((e**2).sum(axis=2)).max(axis=1)

    def boundary_edges(self) -> np.ndarray:
        """(m, 2) vertex pairs of edges owned by exactly one triangle."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        _, idx, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
        return edges[idx[counts == 1]]

    # -- refinement --------------------------------------------------------

    def refine(self, marked) -> "BulkMesh":
        """Bisect the marked triangles, closing recursively for conformity.

        A triangle whose neighbour across the refinement edge does not
        share that refinement edge forces the neighbour to be bisected
        first; one bisection always promotes the shared edge to the
        adjacent child's refinement edge, so the recursion terminates.
        """
        verts = [tuple(v) for v in self.vertices]
        tris = [tuple(t) for t in self.triangles]
        edge_owner: dict = {}

        def register(idx):
            p, a, b = tris[idx]
            for e in ((p, a), (a, b), (b, p)):
                edge_owner.setdefault(_ekey(*e), []).append(idx)

        for i in range(len(tris)):
            register(i)
        midpoint: dict = {}
        alive = [True] * len(tris)
        queue = [int(i) for i in np.flatnonzero(np.asarray(marked, dtype=bool))]

        def bisect(t: int):
            stack = [t]
            while stack:
                i = stack[-1]
                if not alive[i]:
                    stack.pop()
                    continue
                key = _ekey(tris[i][1], tris[i][2])
                partner = [j for j in edge_owner.get(key, []) if alive[j] and j != i]
                ready = True
                for j in partner:
                    if _ekey(tris[j][1], tris[j][2]) != key:
                        stack.append(j)
                        ready = False
                if not ready:
                    continue
                stack.pop()
                m = midpoint.get(key)
                if m is None:
                    a, b = key
                    verts.append(
                        (0.5 * (verts[a][0] + verts[b][0]), 0.5 * (verts[a][1] + verts[b][1]))
                    )
                    m = len(verts) - 1
                    midpoint[key] = m
                for j in [i] + partner:
                    pj, aj, bj = tris[j]
                    alive[j] = False
                    for child in ((m, pj, aj), (m, bj, pj)):
                        tris.append(child)
                        alive.append(True)
                        register(len(tris) - 1)

        for t in queue:
            if alive[t]:
                bisect(t)

        new_tris = [t for t, a in zip(tris, alive) if a]
        return BulkMesh(np.asarray(verts, dtype=float), np.asarray(new_tris, dtype=np.int64))

    # -- point location ----------------------------------------------------

    def _locator(self):
        if self._grid is None:
            self._grid = _TriangleGrid(self)
        return self._grid

    def locate(self, points) -> np.ndarray:
        """Lowest-index triangle containing each point (-1 if outside)."""
        return self._locator().locate(np.atleast_2d(np.asarray(points, dtype=float)))

    def barycentric(self, tri_ids, points) -> np.ndarray:
        p = self.vertices[self.triangles[tri_ids]]
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        d = points - p[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / det
        l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / det
        return np.column_stack((1.0 - l1 - l2, l1, l2))


def _ekey(a: int, b: int):
    return (a, b) if a < b else (b, a)


class _TriangleGrid:
    """Uniform background grid for triangle candidate queries."""

    def __init__(self, mesh: BulkMesh, cells: int = 64):
        self.mesh = mesh
        self.cells = cells
        self.h = (DOMAIN_HI - DOMAIN_LO) / cells
        p = mesh.vertices[mesh.triangles]
        lo = np.clip(((p.min(axis=1) - DOMAIN_LO) / self.h).astype(int), 0, cells - 1)
        hi = np.clip(((p.max(axis=1) - DOMAIN_LO) / self.h).astype(int), 0, cells - 1)
        buckets: dict = {}
        for t in range(mesh.n_triangles):
            for ix in range(lo[t, 0], hi[t, 0] + 1):
                for iy in range(lo[t, 1], hi[t, 1] + 1):
                    buckets.setdefault((ix, iy), []).append(t)
        self.buckets = buckets

    def candidates(self, point):
        ix = min(max(int((point[0] - DOMAIN_LO) / self.h), 0), self.cells - 1)
        iy = min(max(int((point[1] - DOMAIN_LO) / self.h), 0), self.cells - 1)
        return self.buckets.get((ix, iy), ())

    def locate(self, points: np.ndarray) -> np.ndarray:
        verts, tris = self.mesh.vertices, self.mesh.triangles
        out = np.full(points.shape[0], -1, dtype=np.int64)
        for k, q in enumerate(points):
            best = -1
            for t in self.candidates(q):
                p0, p1, p2 = verts[tris[t]]
                det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
                l1 = ((q[0] - p0[0]) * (p2[1] - p0[1]) - (q[1] - p0[1]) * (p2[0] - p0[0])) / det
                l2 = ((p1[0] - p0[0]) * (q[1] - p0[1]) - (p1[1] - p0[1]) * (q[0] - p0[0])) / det
                if l1 >= -_GEOM_TOL and l2 >= -_GEOM_TOL and l1 + l2 <= 1.0 + _GEOM_TOL:
                    if best < 0 or t < best:
                        best = t
            out[k] = best
        return out


def build_initial(levels: int) -> BulkMesh:
    """Uniform grid of 2**(levels-1) x 2**(levels-1) squares, two triangles each.

    Diagonals are the refinement edges, so the first bisection generation
    is immediately compatible.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    n = 2 ** (levels - 1)
    xs = np.linspace(DOMAIN_LO, DOMAIN_HI, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack((X.ravel(), Y.ravel()))

    def vid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            # diagonal v00-v11 is the refinement edge of both triangles;
            # orderings keep the signed areas positive
            tris.append((v10, v11, v00))
            tris.append((v01, v00, v11))
    return BulkMesh(verts, np.asarray(tris, dtype=np.int64))


@dataclass
class AdaptParams:
    """Band refinement parameters; diameters are longest-edge lengths."""

    h_fine: float = 8.0 / 128.0
    h_coarse: float = 8.0 / 16.0
    band_width: float = 2.0 * 8.0 / 128.0

    def __post_init__(self):
        if self.h_fine > self.h_coarse:
            raise ValueError("h_fine must not exceed h_coarse")


def adapt(mesh: BulkMesh, network, params: AdaptParams) -> BulkMesh:
    """Mesh with diameter <= h_fine in a band around the network's curves.

    Rebuilds from the coarse grid, so regions the curves have left revert
    to ``h_coarse``.  If the band flags nothing at all the input mesh is
    returned unchanged with a warning.
    """
    segs = _segment_table(network)
    levels = 1 + max(1, math.ceil(math.log2(8.0 * math.sqrt(2.0) / params.h_coarse)))
    new = build_initial(levels)
    cap = params.band_width + float(new.diameters().max())
    dist = _SegmentDistance(segs, cap=cap)
    flagged_ever = False
    while True:
        h = new.diameters()
        d = dist.at(new.vertices)
        tri_d = d[new.triangles].min(axis=1)
        flags = (h > params.h_fine * (1 + 1e-12)) & (tri_d <= params.band_width + h)
        if not flags.any():
            break
        flagged_ever = True
        new = new.refine(flags)
    if not flagged_ever:
        logger.warning("adapt: no triangle intersects the refinement band; mesh left unchanged")
        return mesh
    return new


def _segment_table(network) -> np.ndarray:
    rows = []
    for c in network.curves:
        seg = c.segments
        rows.append(np.hstack((c.vertices[seg[:, 0]], c.vertices[seg[:, 1]])))
    return np.concatenate(rows, axis=0)


class _SegmentDistance:
    """Distance from points to a set of segments, grid-accelerated and capped.

    Queries farther than ``cap`` report +inf: if no segment lies within the
    scanned cell ring, the true distance provably exceeds the cap, which is
    all a band test needs.
    """

    def __init__(self, segs: np.ndarray, cap: float, cell: float = 0.5):
        self.segs = segs
        self.cell = cell
        self.ring = int(math.ceil(cap / cell)) + 1
        self.buckets: dict = {}
        lo = np.minimum(segs[:, 0:2], segs[:, 2:4])
        hi = np.maximum(segs[:, 0:2], segs[:, 2:4])
        ilo = np.floor((lo - DOMAIN_LO) / cell).astype(int)
        ihi = np.floor((hi - DOMAIN_LO) / cell).astype(int)
        for s in range(segs.shape[0]):
            for ix in range(ilo[s, 0], ihi[s, 0] + 1):
                for iy in range(ilo[s, 1], ihi[s, 1] + 1):
                    self.buckets.setdefault((ix, iy), []).append(s)

    def at(self, points: np.ndarray) -> np.ndarray:
        out = np.full(points.shape[0], np.inf)
        ring = self.ring
        cells = np.floor((points - DOMAIN_LO) / self.cell).astype(int)
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        start = 0
        ring_cache: dict = {}
        while start < order.size:
            stop = start
            key = (cells[order[start], 0], cells[order[start], 1])
            while stop < order.size and tuple(cells[order[stop]]) == key:
                stop += 1
            ids = ring_cache.get(key)
            if ids is None:
                gathered: list = []
                for dx in range(-ring, ring + 1):
                    for dy in range(-ring, ring + 1):
                        gathered += self.buckets.get((key[0] + dx, key[1] + dy), ())
                ids = np.asarray(sorted(set(gathered)), dtype=int)
                ring_cache[key] = ids
            if ids.size:
                group = order[start:stop]
                seg = self.segs[ids]
                a = seg[:, 0:2]
                h = seg[:, 2:4] - a
                hh = (h**2).sum(axis=1)
                q = points[group]
                t = np.clip(
                    ((q[:, None, :] - a[None, :, :]) * h[None, :, :]).sum(axis=2) / hh[None, :],
                    0.0,
                    1.0,
                )
                proj = a[None, :, :] + t[..., None] * h[None, :, :]
                d2 = ((q[:, None, :] - proj) ** 2).sum(axis=2)
                out[group] = np.sqrt(d2.min(axis=1))
            start = stop
        return out




def assemble_stiffness(mesh: BulkMesh) -> sp.csr_matrix:
    """P1 stiffness matrix (no boundary conditions applied)."""
    tris = mesh.triangles
    p = mesh.vertices[tris]
    areas = mesh.areas()
    if np.any(areas <= 0.0):
        raise ValueError("degenerate triangle in mesh")
    # gradient of barycentric i is perp(edge opposite i) / (2 area)
    g = np.empty((mesh.n_triangles, 3, 2))
    for i in range(3):
        e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
        g[:, i, 0] = -e[:, 1]
        g[:, i, 1] = e[:, 0]
    g /= (2.0 * areas)[:, None, None]
    loc = np.einsum("tia,tja,t->tij", g, g, areas)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    A = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    return A.tocsr()


def transfer_nodal(old: BulkMesh, values: np.ndarray, new: BulkMesh) -> np.ndarray:
    """Interpolate a P1 field (per-vertex values, any trailing shape) onto ``new``."""
    values = np.asarray(values, dtype=float)
    tri = old.locate(new.vertices)
    if np.any(tri < 0):
        raise ValueError("transfer target vertex outside the source mesh")
    lam = old.barycentric(tri, new.vertices)
    vt = values[old.triangles[tri]]  # (n, 3, ...)
    return np.einsum("nk,nk...->n...", lam, vt)


@dataclass
class BoundarySpec:
    """Dirichlet/Neumann split of the outer boundary plus the pinned values.

    ``dirichlet`` selects where values are pinned: "none", "all", "right"
    (the face x = 4), or a predicate on edge midpoints.  ``w_values`` is the
    per-phase boundary vector; it must sum to zero, which is what makes the
    eliminated potential component consistent.
    """

    dirichlet: object = "none"
    w_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.w_values = np.asarray(self.w_values, dtype=float)
        if self.w_values.size and abs(self.w_values.sum()) > 1e-12 * max(
            1.0, np.abs(self.w_values).max()
        ):
            raise ValueError("boundary values must sum to zero")

    def dirichlet_nodes(self, mesh: BulkMesh) -> np.ndarray:
        """Sorted vertex ids lying on Dirichlet edges."""
        if self.dirichlet == "none":
            return np.zeros(0, dtype=np.int64)
        edges = mesh.boundary_edges()
        mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        if self.dirichlet == "all":
            sel = np.ones(edges.shape[0], dtype=bool)
        elif self.dirichlet == "right":
            sel = np.abs(mids[:, 0] - DOMAIN_HI) < _GEOM_TOL
        elif callable(self.dirichlet):
            sel = np.array([bool(self.dirichlet(m)) for m in mids])
        else:
            raise ValueError(f"unknown dirichlet selector {self.dirichlet!r}")
        return np.unique(edges[sel].ravel())


def dirichlet_apply(matrix: sp.csr_matrix, rhs: np.ndarray, rows: np.ndarray, values: np.ndarray):
    """Replace the given rows by identity rows with the prescribed values."""
    matrix = matrix.tolil()
    for r, v in zip(rows, values):
        matrix.rows[r] = [int(r)]
        matrix.data[r] = [1.0]
        rhs[r] = v
    return matrix.tocsr(), rhs
