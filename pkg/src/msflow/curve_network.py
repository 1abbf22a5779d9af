"""Polygonal curve networks with triple junctions.

A network is a list of open or closed polygonal curves, a list of triple
junctions matching curve endpoints, and an orientation matrix recording
which phase lies on which side of each curve.  This module supplies the
discrete geometric calculus the evolution scheme is built from: segment
and vertex normals, mass-lumped inner products, oriented region areas,
the anisotropic length, and the heuristic surgeries that remove curves
which have become too short.

Conventions
-----------
* A segment with chord ``h = q2 - q1`` has unit normal ``perp(h)/|h|``
  with ``perp(v) = (-v_y, v_x)``; for a counterclockwise closed curve the
  normal points into the enclosed region.
* Curve orientations are chosen so the normal points from the phase whose
  orientation entry is +1 into the phase whose entry is -1.
* The vertex normal is the mass-lumped L2 projection of the piecewise
  constant segment normals onto the vertexwise-linear space.  Testing the
  projection identity with a nodal hat at vertex q gives
  ``m_q * omega(q) = sum_{segments at q} |s|/2 * nu_s`` with lumped mass
  ``m_q = sum |s|/2``, i.e. omega is the length-weighted average of the
  incident segment normals; that closed form is used directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

__all__ = [
    "Curve",
    "JunctionMap",
    "CurveNetwork",
    "SurgeryEvent",
    "segment_normal",
    "surgery_scan",
    "apply_surgery",
    "lumped_inner",
]

_COINCIDE_TOL = 1e-9


def _perp(v: np.ndarray) -> np.ndarray:
    """Rotate by +90 degrees: (x, y) -> (-y, x). Works on (..., 2) arrays."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def segment_normal(q1, q2) -> np.ndarray:
    """Unit normal perp(q2 - q1) / |q2 - q1| of a single segment."""
    h = np.asarray(q2, dtype=float) - np.asarray(q1, dtype=float)
    n = np.hypot(h[0], h[1])
    if n == 0.0:
        raise ValueError("zero-length segment")
    return np.array([-h[1], h[0]]) / n


class Curve:
    """One polygonal curve: an ordered vertex list, open or closed."""

    __slots__ = ("vertices", "closed", "label")

    def __init__(self, vertices, closed: bool, label: str = ""):
        v = np.ascontiguousarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("vertices must be an (n, 2) array")
        if v.shape[0] < (3 if closed else 2):
            raise ValueError("curve has too few vertices")
        self.vertices = v
        self.closed = bool(closed)
        self.label = label
        if np.any(self.segment_lengths() == 0.0):
            raise ValueError(f"zero-length segment on curve {label!r}")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def segments(self) -> np.ndarray:
        """Ordered (m, 2) vertex index pairs, including the wrap for closed curves."""
        n = self.n_vertices
        a = np.arange(n if self.closed else n - 1)
        return np.column_stack((a, (a + 1) % n))

    def chords(self) -> np.ndarray:
        seg = self.segments
        return self.vertices[seg[:, 1]] - self.vertices[seg[:, 0]]

    def segment_lengths(self) -> np.ndarray:
        h = self.chords()
        return np.hypot(h[:, 0], h[:, 1])

    def segment_normals(self) -> np.ndarray:
        h = self.chords()
        return _perp(h) / np.hypot(h[:, 0], h[:, 1])[:, None]

    def length(self) -> float:
        return float(self.segment_lengths().sum())

    def lumped_masses(self) -> np.ndarray:
        """Per-vertex lumped mass: half the total incident segment length."""
        m = np.zeros(self.n_vertices)
        seg, ell = self.segments, self.segment_lengths()
        np.add.at(m, seg[:, 0], 0.5 * ell)
        np.add.at(m, seg[:, 1], 0.5 * ell)
        return m

    def vertex_normals(self) -> np.ndarray:
        """Lumped projection of segment normals; see the module docstring."""
        seg = self.segments
        if seg.shape[0] == 0:
            raise ValueError("curve without segments")
        ell = self.segment_lengths()
        nu = self.segment_normals()
        acc = np.zeros_like(self.vertices)
        w = 0.5 * ell[:, None] * nu
        np.add.at(acc, seg[:, 0], w)
        np.add.at(acc, seg[:, 1], w)
        return acc / self.lumped_masses()[:, None]

    def shoelace(self) -> float:
        """Signed sum (1/2) * sum cross(q_a, q_b) over the curve's segments.

        For a closed counterclockwise curve this is the enclosed area.  Open
        curves contribute chain terms that only acquire meaning once the
        chains of a region's boundary are summed.
        """
        seg = self.segments
        qa = self.vertices[seg[:, 0]]
        qb = self.vertices[seg[:, 1]]
        return 0.5 * float(np.sum(qa[:, 0] * qb[:, 1] - qb[:, 0] * qa[:, 1]))

    def endpoints(self):
        if self.closed:
            raise ValueError("closed curve has no endpoints")
        return 0, self.n_vertices - 1

    def copy(self) -> "Curve":
        return Curve(self.vertices.copy(), self.closed, self.label)


@dataclass(frozen=True)
class JunctionMap:
    """Three curves matched along equally long boundary vertex sequences.

    In 2D every curve boundary patch is a single vertex, so the matched
    sequences have length one; the sequence form is kept so the matching
    data model does not special-case the dimension.
    """

    curves: tuple
    vertex_lists: tuple

    def __post_init__(self):
        if len(self.curves) != 3 or len(self.vertex_lists) != 3:
            raise ValueError("a junction joins exactly three curves")
        n = {len(v) for v in self.vertex_lists}
        if len(n) != 1 or n.pop() < 1:
            raise ValueError("matched vertex sequences must have equal positive length")

    @property
    def n_matched(self) -> int:
        return len(self.vertex_lists[0])


class CurveNetwork:
    """Curve cluster with junction matching and phase orientations.

    Parameters
    ----------
    curves : list of Curve
    junctions : list of JunctionMap
    orientation : (n_phases, n_curves) int array with entries in {-1, 0, 1};
        every column carries exactly one +1 and one -1.  Entry (l, i) = +1
        means the normal of curve i points out of phase l, -1 into it.
    exterior_phase : index of the phase containing the outer boundary; its
        area is inferred as the domain area minus the others.
    """

    def __init__(self, curves, junctions, orientation, exterior_phase: int):
        self.curves = list(curves)
        self.junctions = list(junctions)
        self.orientation = np.asarray(orientation, dtype=int)
        self.exterior_phase = int(exterior_phase)
        self._validate()

    # -- structure ---------------------------------------------------------

    def _validate(self):
        O = self.orientation
        if O.ndim != 2 or O.shape[1] != len(self.curves):
            raise ValueError("orientation matrix shape does not match the curves")
        if not 0 <= self.exterior_phase < O.shape[0]:
            raise ValueError("exterior phase out of range")
        for i, col in enumerate(O.T):
            if sorted(col.tolist()).count(0) != len(col) - 2 or col.max() != 1 or col.min() != -1:
                raise ValueError(f"orientation column {i} must hold one +1 and one -1")
        used = {}
        for k, jm in enumerate(self.junctions):
            for c, verts in zip(jm.curves, jm.vertex_lists):
                curve = self.curves[c]
                if curve.closed:
                    raise ValueError(f"junction {k} references closed curve {c}")
                for v in verts:
                    if v not in curve.endpoints():
                        raise ValueError(f"junction {k} references interior vertex {v} of curve {c}")
                    key = (c, v)
                    if key in used:
                        raise ValueError(f"curve end {key} referenced by two junctions")
                    used[key] = k
        for c, curve in enumerate(self.curves):
            if curve.closed:
                continue
            for v in curve.endpoints():
                if (c, v) not in used:
                    raise ValueError(f"open end (curve {c}, vertex {v}) is attached to no junction")
        err = self.junction_mismatch()
        if err > _COINCIDE_TOL:
            raise ValueError(f"matched junction vertices differ by {err:.3e}")

    def junction_mismatch(self) -> float:
        """Largest coordinate gap between matched junction vertices."""
        worst = 0.0
        for jm in self.junctions:
            for z in range(jm.n_matched):
                pts = [self.curves[c].vertices[jm.vertex_lists[r][z]] for r, c in enumerate(jm.curves)]
                for p in pts[1:]:
                    worst = max(worst, float(np.max(np.abs(p - pts[0]))))
        return worst

    @property
    def n_phases(self) -> int:
        return self.orientation.shape[0]

    @property
    def n_curves(self) -> int:
        return len(self.curves)

    def offsets(self) -> np.ndarray:
        """Global scalar-dof offset of each curve (vertexwise numbering)."""
        return np.concatenate(([0], np.cumsum([c.n_vertices for c in self.curves])))

    @property
    def n_dofs(self) -> int:
        return int(sum(c.n_vertices for c in self.curves))

    def all_vertices(self) -> np.ndarray:
        return np.concatenate([c.vertices for c in self.curves], axis=0)

    def with_vertices(self, X: np.ndarray) -> "CurveNetwork":
        """New network with the stacked vertex array replaced by X."""
        X = np.asarray(X, dtype=float).reshape(self.n_dofs, 2)
        off = self.offsets()
        curves = [
            Curve(X[off[i]:off[i + 1]].copy(), c.closed, c.label)
            for i, c in enumerate(self.curves)
        ]
        return CurveNetwork(curves, self.junctions, self.orientation, self.exterior_phase)

    def lumped_masses(self) -> np.ndarray:
        return np.concatenate([c.lumped_masses() for c in self.curves])

    def vertex_normals(self) -> np.ndarray:
        return np.concatenate([c.vertex_normals() for c in self.curves], axis=0)

    def junction_groups(self):
        """Per matched position: (global dof triple, lumped mass triple).

        This is the data behind the junction-matching projection: the
        projection replaces the three matched vertex values by their
        lumped-mass weighted average.
        """
        off = self.offsets()
        masses = self.lumped_masses()
        groups = []
        for jm in self.junctions:
            for z in range(jm.n_matched):
                ids = np.array(
                    [off[c] + jm.vertex_lists[r][z] for r, c in enumerate(jm.curves)],
                    dtype=int,
                )
                groups.append((ids, masses[ids]))
        return groups

    # -- measures ----------------------------------------------------------

    def total_length(self) -> float:
        return float(sum(c.length() for c in self.curves))

    def anisotropic_length(self, anisotropies) -> float:
        """sum_i sum_segments |s| * gamma_i(nu_s)."""
        if len(anisotropies) != self.n_curves:
            raise ValueError("need one density per curve")
        total = 0.0
        for curve, gamma in zip(self.curves, anisotropies):
            total += float(np.sum(curve.segment_lengths() * gamma(curve.segment_normals())))
        return total

    def region_areas(self, domain_area: float = 64.0):
        """Per-phase areas from oriented boundary integrals.

        Interior phases get the divergence-theorem value; the designated
        exterior phase absorbs the remainder so the areas sum to the domain
        area exactly.  Returns ``(areas, suspicious)`` where ``suspicious``
        flags a nonpositive interior area, the best-effort signal of a
        tangled network.
        """
        shoe = np.array([c.shoelace() for c in self.curves])
        # outward normal of phase l on curve i is O_li * nu_i, and the
        # boundary integral (1/2) int x . nu over a curve equals -shoelace.
        areas = -(self.orientation @ shoe)
        areas[self.exterior_phase] = domain_area - (areas.sum() - areas[self.exterior_phase])
        suspicious = bool(
            np.any(np.delete(areas, self.exterior_phase) <= 0.0) or areas[self.exterior_phase] <= 0.0
        )
        return areas, suspicious

    def closed_curve_areas(self) -> dict:
        """Absolute enclosed area of each closed curve, keyed by curve index."""
        return {
            i: abs(c.shoelace()) for i, c in enumerate(self.curves) if c.closed
        }


def lumped_inner(u, v, network: CurveNetwork) -> float:
    """Mass-lumped inner product of two vertexwise fields on the network.

    ``u`` and ``v`` are (N,) scalar or (N, 2) vector arrays over the
    network's stacked vertices; the value is
    (1/2) * sum_segments |s| * (u.v at both segment ends).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.shape[0] != network.n_dofs:
        raise ValueError("field layouts do not match the network")
    uv = u * v if u.ndim == 1 else np.einsum("ki,ki->k", u, v)
    return float(np.dot(network.lumped_masses(), uv))


# -- surgery ----------------------------------------------------------------


@dataclass
class SurgeryEvent:
    """One detected topological fix: discard a loop or excise a short curve."""

    kind: str                 # "discard" | "remove-and-glue"
    curve: int
    length: float
    area: float = 0.0         # last enclosed area, discard events only
    label: str = ""
    deferred: bool = False


def surgery_scan(network: CurveNetwork, min_length, min_vertices: int = 4):
    """Flag curves shorter than their threshold; the network is not touched.

    ``min_length`` is a scalar or per-curve sequence.  Closed short curves
    become "discard" events; short junction curves become
    "remove-and-glue" events.
    """
    eps = np.broadcast_to(np.asarray(min_length, dtype=float), (network.n_curves,))
    events = []
    for i, c in enumerate(network.curves):
        L = c.length()
        if L < eps[i] or c.n_vertices < min_vertices:
            kind = "discard" if c.closed else "remove-and-glue"
            area = abs(c.shoelace()) if c.closed else 0.0
            events.append(SurgeryEvent(kind, i, L, area, c.label))
    return events


def _glue_chains(network: CurveNetwork, removed: set):
    """Concatenate the curve ends left dangling after removing ``removed``.

    Junctions connected through removed curves collapse to a single point
    (the mean of their positions; for one removed curve this is the midpoint
    of its two junctions).  Around each collapsed cluster the surviving ends
    are joined pairwise, junction by junction; if a cluster is left with
    exactly two unpaired ends they are joined across the cluster, which is
    how a curve closes onto itself when a whole bubble disappears.
    Joins are only performed when the glued curves separate the same phase
    pair; otherwise the caller must defer the surgery.
    """
    O = network.orientation
    junctions = network.junctions

    # union-find over junctions, connected via removed curves
    parent = list(range(len(junctions)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    curve_junctions = {}
    for k, jm in enumerate(junctions):
        for c in jm.curves:
            curve_junctions.setdefault(c, []).append(k)
    for c in removed:
        ks = curve_junctions.get(c, [])
        for k in ks[1:]:
            ra, rb = find(ks[0]), find(k)
            if ra != rb:
                parent[rb] = ra

    affected = {find(k) for c in removed for k in curve_junctions.get(c, [])}

    # ends that survive around each affected cluster, as (curve, which_end)
    cluster_ends = {r: [] for r in affected}
    cluster_pos = {r: [] for r in affected}
    untouched_junctions = []
    for k, jm in enumerate(junctions):
        r = find(k)
        if r not in affected:
            untouched_junctions.append(jm)
            continue
        pos = network.curves[jm.curves[0]].vertices[jm.vertex_lists[0][0]]
        cluster_pos[r].append(pos)
        for c, verts in zip(jm.curves, jm.vertex_lists):
            if c in removed:
                continue
            cluster_ends[r].append((k, c, verts[0]))

    joins = []  # (curve_a, end_a, curve_b, end_b, point)
    for r in affected:
        point = np.mean(np.asarray(cluster_pos[r]), axis=0)
        ends = cluster_ends[r]
        by_junction = {}
        for k, c, v in ends:
            by_junction.setdefault(k, []).append((c, v))
        leftovers = []
        for k, items in sorted(by_junction.items()):
            if len(items) == 2:
                joins.append((*items[0], *items[1], point))
            elif len(items) == 1:
                leftovers.append(items[0])
            else:
                raise ValueError("junction left with an unexpected number of ends")
        if len(leftovers) == 2:
            joins.append((*leftovers[0], *leftovers[1], point))
        elif leftovers:
            raise ValueError("cannot pair dangling curve ends after surgery")

    # Phase-pair consistency of every join.  Joining end va of curve ca to
    # end vb of curve cb means the merged curve runs along ca into the join
    # and out along cb; a piece entered at its last vertex keeps its
    # direction, one entered at its first vertex is reversed, and reversal
    # negates the curve's orientation column.
    for ca, va, cb, vb, _ in joins:
        if ca == cb:
            continue
        a_forward = va != 0
        b_forward = vb == 0
        need = O[:, cb] if a_forward == b_forward else -O[:, cb]
        if not np.array_equal(O[:, ca], need):
            return None, None, None  # inconsistent: caller defers

    return joins, affected, untouched_junctions


def apply_surgery(network: CurveNetwork, events):
    """Apply scan events, returning (new_network, applied, deferred, curve_map).

    Discards always apply.  Remove-and-glue events apply jointly; when the
    resulting joins would merge curves separating different phase pairs the
    glue set is deferred untouched (the configuration is still collapsing
    and a later scan will flag the partner curves too).  ``curve_map`` lists,
    for every curve of the new network, the old curve indices it came from.
    """
    discards = [e for e in events if e.kind == "discard"]
    glues = [e for e in events if e.kind == "remove-and-glue"]
    applied = list(discards)
    deferred = []

    curves = [c.copy() for c in network.curves]
    junctions = list(network.junctions)
    O = network.orientation.copy()
    drop = {e.curve for e in discards}
    parents = [[i] for i in range(len(curves))]

    if glues:
        removed = {e.curve for e in glues}
        joins, _affected, kept_junctions = _glue_chains(network, removed)
        if joins is None:
            for e in glues:
                e.deferred = True
            deferred = glues
        else:
            applied += glues
            old_parents = parents
            curves, O, remap = _merge_curves(curves, O, joins, removed)
            n_new = len(curves)
            parents = [[] for _ in range(n_new)]
            for old, (new_idx, _vmap) in remap.items():
                parents[new_idx] += old_parents[old]
            junctions = [
                JunctionMap(
                    tuple(remap[c][0] for c in jm.curves),
                    tuple(
                        tuple(remap[c][1](v) for v in verts)
                        for c, verts in zip(jm.curves, jm.vertex_lists)
                    ),
                )
                for jm in kept_junctions
            ]
            drop = {remap[c][0] for c in drop}

    if drop:
        keep = [i for i in range(len(curves)) if i not in drop]
        remap_idx = {old: new for new, old in enumerate(keep)}
        curves = [curves[i] for i in keep]
        O = O[:, keep]
        parents = [parents[i] for i in keep]
        junctions = [
            JunctionMap(tuple(remap_idx[c] for c in jm.curves), jm.vertex_lists)
            for jm in junctions
        ]

    new = CurveNetwork(curves, junctions, O, network.exterior_phase)
    return new, applied, deferred, parents


def _merge_curves(curves, O, joins, removed):
    """Concatenate curves along the join list; returns (curves, O, remap).

    ``remap`` maps every original curve index to ``(new_index, vertex_map)``
    where ``vertex_map`` translates old endpoint indices of that curve into
    indices on the merged curve.
    """
    # chain representation: each surviving curve starts as its own chain
    chains = {
        i: [(i, False)] for i in range(len(curves)) if i not in removed
    }
    owner = {i: i for i in chains}
    closed = {}

    def chain_ends(cid):
        chain = chains[cid]
        first_curve, first_rev = chain[0]
        last_curve, last_rev = chain[-1]
        n_first = curves[first_curve].n_vertices
        n_last = curves[last_curve].n_vertices
        start = (first_curve, (n_first - 1) if first_rev else 0)
        end = (last_curve, 0 if last_rev else (n_last - 1))
        return start, end

    join_points = {}
    for ca, va, cb, vb, point in joins:
        ra, rb = owner[ca], owner[cb]
        join_points[(ca, va)] = point
        join_points[(cb, vb)] = point
        if ra == rb:
            closed[ra] = True
            continue
        sa, ea = chain_ends(ra)
        # orient chain ra so that it ends at (ca, va)
        if (ca, va) == sa:
            chains[ra] = [(c, not r) for c, r in reversed(chains[ra])]
        elif (ca, va) != ea:
            raise ValueError("join does not touch a chain end")
        sb, eb = chain_ends(rb)
        if (cb, vb) == eb:
            chains[rb] = [(c, not r) for c, r in reversed(chains[rb])]
        elif (cb, vb) != sb:
            raise ValueError("join does not touch a chain end")
        chains[ra] = chains[ra] + chains[rb]
        for c, _ in chains[rb]:
            owner[c] = ra
        del chains[rb]

    new_curves = []
    new_cols = []
    remap = {}
    for new_idx, (cid, chain) in enumerate(sorted(chains.items())):
        pieces = []
        vmaps = {}
        cursor = 0
        for c, rev in chain:
            V = curves[c].vertices[::-1] if rev else curves[c].vertices
            n = V.shape[0]
            if pieces:
                V = V[1:]
                base = cursor - 1
            else:
                base = cursor
            def vmap(v, n=n, rev=rev, base=base):
                local = (n - 1 - v) if rev else v
                return base + local
            vmaps[c] = vmap
            pieces.append(V)
            cursor = base + n
        V = np.concatenate(pieces, axis=0)
        is_closed = closed.get(cid, False) or curves[chain[0][0]].closed
        if is_closed and len(chain) > 0 and not curves[chain[0][0]].closed:
            # self-join: last vertex duplicates the first
            V = V[:-1]
        # place join points
        for c, rev in chain:
            for v_old in (0, curves[c].n_vertices - 1):
                p = join_points.get((c, v_old))
                if p is not None:
                    V[vmaps[c](v_old) % V.shape[0]] = p
        label = "+".join(curves[c].label or str(c) for c, _ in chain)
        col0 = O[:, chain[0][0]] * (-1 if chain[0][1] else 1)
        new_curves.append(Curve(V, is_closed, label))
        new_cols.append(col0)
        for c, rev in chain:
            nv = V.shape[0]
            def vmap_mod(v, f=vmaps[c], nv=nv):
                return f(v) % nv
            remap[c] = (new_idx, vmap_mod)

    return new_curves, np.array(new_cols).T, remap
