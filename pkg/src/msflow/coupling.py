"""Unfitted bulk-curve quadrature.

The bulk triangulation knows nothing about the curves, so every product of
a bulk basis function with a curve basis function is integrated by first
splitting each curve segment at its triangle crossings.  On a sub-segment
both factors are affine in the arclength parameter, so two-point Gauss
integrates the product exactly; a mass-lumped variant that samples at the
curve vertices is kept as an option.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .bulk_mesh import BulkMesh, DOMAIN_HI, DOMAIN_LO

__all__ = ["SubSegment", "clip_segments", "assemble_cross_mass", "assemble_velocity_blocks", "InterfaceLeftDomain"]

_TOL = 1e-12
_GAUSS_T = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


class InterfaceLeftDomain(RuntimeError):
    """A curve segment could not be covered by the triangulation."""


@dataclass(frozen=True)
class SubSegment:
    """Piece of one curve segment living inside a single triangle."""

    curve: int
    segment: int
    a: float
    b: float
    tri: int


def clip_segments(mesh: BulkMesh, network) -> list:
    """Split every curve segment at triangle-edge crossings.

    Per segment the sub-intervals partition [0, 1]; the host triangle is
    decided by the interval midpoint, ties (a piece running along a shared
    edge) going to the lower triangle index.
    """
    V = network.all_vertices()
    if V.min() < DOMAIN_LO - _TOL or V.max() > DOMAIN_HI + _TOL:
        raise InterfaceLeftDomain("interface left domain")
    grid = mesh._locator()
    verts, tris = mesh.vertices, mesh.triangles

    # flat segment table
    seg_curve, seg_index, Q0, Q1 = [], [], [], []
    for ci, curve in enumerate(network.curves):
        seg = curve.segments
        seg_curve += [ci] * seg.shape[0]
        seg_index += list(range(seg.shape[0]))
        Q0.append(curve.vertices[seg[:, 0]])
        Q1.append(curve.vertices[seg[:, 1]])
    Q0 = np.concatenate(Q0)
    Q1 = np.concatenate(Q1)
    n_seg = Q0.shape[0]

    # candidate (segment, triangle) pairs from the background grid
    inv_h = 1.0 / grid.h
    ncell = grid.cells
    buckets = grid.buckets
    pair_seg, pair_tri = [], []
    for s in range(n_seg):
        x0, y0 = Q0[s]
        x1, y1 = Q1[s]
        steps = int(max(abs(x1 - x0), abs(y1 - y0)) * inv_h) + 2
        seen = set()
        for k in range(steps + 1):
            t = k / steps
            ix = int((x0 + t * (x1 - x0) - DOMAIN_LO) * inv_h)
            iy = int((y0 + t * (y1 - y0) - DOMAIN_LO) * inv_h)
            for cx in range(max(0, ix - 1), min(ncell, ix + 2)):
                for cy in range(max(0, iy - 1), min(ncell, iy + 2)):
                    seen.add((cx, cy))
        cand = set()
        for c in seen:
            cand.update(buckets.get(c, ()))
        if not cand:
            raise InterfaceLeftDomain(
                f"segment {seg_index[s]} of curve {seg_curve[s]} not covered by the mesh"
            )
        cand = sorted(cand)
        pair_seg += [s] * len(cand)
        pair_tri += cand

    pair_seg = np.asarray(pair_seg)
    pair_tri = np.asarray(pair_tri)

    # clip the parameter interval of every pair at once: each edge of a
    # counterclockwise triangle is an inward half-plane, linear in t
    p = verts[tris[pair_tri]]                  # (m, 3, 2)
    e = p[:, [1, 2, 0]] - p
    nx, ny = -e[..., 1], e[..., 0]
    q0 = Q0[pair_seg]
    q1 = Q1[pair_seg]
    f0 = nx * (q0[:, 0, None] - p[..., 0]) + ny * (q0[:, 1, None] - p[..., 1])
    f1 = nx * (q1[:, 0, None] - p[..., 0]) + ny * (q1[:, 1, None] - p[..., 1])
    scale = np.maximum(np.abs(nx), np.abs(ny))
    df = f1 - f0
    degenerate = np.abs(df) <= _TOL * scale
    excluded = np.any(degenerate & (f0 < -_TOL * scale), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tcross = -f0 / df
    lo = np.maximum(np.where(~degenerate & (df > 0), tcross, 0.0).max(axis=1), 0.0)
    hi = np.minimum(np.where(~degenerate & (df < 0), tcross, 1.0).min(axis=1), 1.0)
    keep = ~excluded & (hi - lo > _TOL)

    out = []
    start = 0
    m = pair_seg.size
    for s in range(n_seg):
        stop = start
        while stop < m and pair_seg[stop] == s:
            stop += 1
        ivals = [
            (lo[i], hi[i], int(pair_tri[i])) for i in range(start, stop) if keep[i]
        ]
        start = stop
        pieces = _partition_intervals(ivals)
        if pieces is None:
            raise InterfaceLeftDomain(
                f"segment {seg_index[s]} of curve {seg_curve[s]} not covered by the mesh"
            )
        ci, si = seg_curve[s], seg_index[s]
        out.extend(SubSegment(ci, si, a, b, t) for a, b, t in pieces)
    return out


def _partition_intervals(ivals):
    """Merge near-identical breakpoints and host every elementary piece
    with the lowest covering triangle."""
    if not ivals:
        return None
    cuts = sorted({0.0, 1.0} | {a for a, _, _ in ivals} | {b for _, b, _ in ivals})
    merged = [cuts[0]]
    for c in cuts[1:]:
        if c - merged[-1] > _TOL:
            merged.append(c)
    merged[0], merged[-1] = 0.0, 1.0
    pieces = []
    for a, b in zip(merged[:-1], merged[1:]):
        mid = 0.5 * (a + b)
        host = -1
        for lo_, hi_, t in ivals:
            if lo_ - _TOL <= mid <= hi_ + _TOL and (host < 0 or t < host):
                host = t
        if host < 0:
            return None
        pieces.append((float(a), float(b), host))
    return pieces


def assemble_cross_mass(mesh: BulkMesh, network, lumped: bool = False, pieces=None):
    """Per-curve sparse blocks of integrals (bulk basis) * (curve basis).

    Returns a list of CSR matrices, one per curve, with shape
    (curve vertices) x (bulk vertices).  The exact variant uses two-point
    Gauss on the clipped sub-segments; the lumped variant concentrates each
    curve basis function's mass at its vertex.
    """
    P = mesh.n_vertices
    blocks = []
    if lumped:
        grid = mesh._locator()
        for curve in network.curves:
            m = curve.lumped_masses()
            tri = grid.locate(curve.vertices)
            if np.any(tri < 0):
                raise InterfaceLeftDomain("curve vertex outside the mesh")
            lam = mesh.barycentric(tri, curve.vertices)
            rows = np.repeat(np.arange(curve.n_vertices), 3)
            cols = mesh.triangles[tri].ravel()
            vals = (m[:, None] * lam).ravel()
            blocks.append(
                sp.coo_matrix((vals, (rows, cols)), shape=(curve.n_vertices, P)).tocsr()
            )
        return blocks

    if pieces is None:
        pieces = clip_segments(mesh, network)
    per_curve = {i: [] for i in range(network.n_curves)}
    for s in pieces:
        per_curve[s.curve].append(s)
    for ci, curve in enumerate(network.curves):
        seg = curve.segments
        ell = curve.segment_lengths()
        ps = per_curve[ci]
        if not ps:
            blocks.append(sp.csr_matrix((curve.n_vertices, P)))
            continue
        sidx = np.array([s.segment for s in ps])
        aa = np.array([s.a for s in ps])
        bb = np.array([s.b for s in ps])
        tri = np.array([s.tri for s in ps])
        q0 = curve.vertices[seg[sidx, 0]]                      # (m, 2)
        dq = curve.vertices[seg[sidx, 1]] - q0
        ts = aa[:, None] + (bb - aa)[:, None] * _GAUSS_T[None, :]   # (m, 2)
        pts = q0[:, None, :] + ts[..., None] * dq[:, None, :]       # (m, 2, 2)
        tri_rep = np.repeat(tri, 2)
        lam = mesh.barycentric(tri_rep, pts.reshape(-1, 2)).reshape(len(ps), 2, 3)
        w = ((bb - aa) * ell[sidx])[:, None] * _GAUSS_W[None, :]    # (m, 2)
        phi = np.stack((1.0 - ts, ts), axis=2)                      # (m, 2g, 2k)
        contrib = np.einsum("mg,mgk,mgj->mkj", w, phi, lam)         # (m, 2, 3)
        nodes = mesh.triangles[tri]                                 # (m, 3)
        rows = np.repeat(seg[sidx], 3, axis=1).ravel()              # m*(2k*3)
        cols = np.tile(nodes, (1, 2)).ravel()
        blocks.append(
            sp.coo_matrix(
                (contrib.ravel(), (rows, cols)), shape=(curve.n_vertices, P)
            ).tocsr()
        )
    return blocks


def assemble_velocity_blocks(cross_blocks, network, tau: float):
    """Velocity cross blocks: rows of the cross mass scaled by vertex normals / tau.

    Returns per-curve pairs (Nx, Ny) so that the motion-law coupling of a
    displacement field dX is Nx^T (dX_x rows) + ... assembled by the caller.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    out = []
    off = network.offsets()
    omega = network.vertex_normals()
    for ci, B in enumerate(cross_blocks):
        w = omega[off[ci]:off[ci + 1]]
        Nx = sp.diags(w[:, 0] / tau) @ B
        Ny = sp.diags(w[:, 1] / tau) @ B
        out.append((Nx.tocsr(), Ny.tocsr()))
    return out
