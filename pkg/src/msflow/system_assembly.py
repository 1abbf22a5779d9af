"""Block matrices and the reduced linear operator for one time step.

Unknown ordering is (reduced potentials, curvature, vertex displacement):
the potentials drop their final phase component, which the zero-sum
constraint reconstructs as minus the sum of the others, and the junction
matching constraint is enforced by composing the displacement columns and
the curvature-equation rows with the lumped-mass orthogonal projection
onto junction-matched fields.  That projection is applied operator-style;
the unprojected matrix is only materialized for the preconditioner and for
tests.

Sign conventions follow the orientation matrix: with entries
O[l, c] in {-1, 0, +1} (+1 where the curve's normal leaves phase l), the
cross blocks carry the factor O[l, c], and the reduced potential coupling
carries O[l, c] - O[last, c].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bulk_mesh import BulkMesh, BoundarySpec, assemble_stiffness
from .coupling import assemble_cross_mass, clip_segments

__all__ = [
    "BlockSystem",
    "ProjectionP",
    "assemble_blocks",
    "expand_potentials",
    "reduce_potentials",
]


class ProjectionP:
    """Lumped-mass orthogonal projection onto junction-matched displacements.

    Each matched triple of vertex values is replaced by its mass-weighted
    average; everything else passes through.  Idempotent and symmetric in
    the lumped-mass inner product.
    """

    def __init__(self, groups, n_dofs: int):
        self.n_dofs = n_dofs
        if groups:
            self.ids = np.array([g[0] for g in groups], dtype=int)
            w = np.array([g[1] for g in groups], dtype=float)
            self.w = w / w.sum(axis=1, keepdims=True)
        else:
            self.ids = np.zeros((0, 3), dtype=int)
            self.w = np.zeros((0, 3))

    @property
    def trivial(self) -> bool:
        return self.ids.shape[0] == 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Apply to a flat (2N,) interleaved vector or an (N, 2) array."""
        flat = x.ndim == 1
        v = x.reshape(self.n_dofs, 2).copy()
        if not self.trivial:
            avg = np.einsum("gr,grd->gd", self.w, v[self.ids])
            v[self.ids.ravel()] = np.repeat(avg, 3, axis=0)
        return v.ravel() if flat else v

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        """Euclidean transpose: group entries become weight * (group sum).

        Composing equation rows with this is equivalent to testing them
        against the matched space only (the group residual sums vanish),
        which is the Galerkin condition the merged formulation enforces.
        """
        flat = x.ndim == 1
        v = x.reshape(self.n_dofs, 2).copy()
        if not self.trivial:
            total = v[self.ids].sum(axis=1)
            v[self.ids.ravel()] = (self.w[:, :, None] * total[:, None, :]).reshape(-1, 2)
        return v.ravel() if flat else v

    def matrix(self) -> sp.csr_matrix:
        """The projection as a sparse matrix (group rows hold the weights)."""
        n = self.n_dofs
        rows, cols, vals = [], [], []
        in_group = np.zeros(n, dtype=bool)
        for g, w in zip(self.ids, self.w):
            in_group[g] = True
            for r in g:
                for c, wc in zip(g, w):
                    for d in range(2):
                        rows.append(2 * r + d)
                        cols.append(2 * c + d)
                        vals.append(wc)
        free = np.flatnonzero(~in_group)
        for r in free:
            for d in range(2):
                rows.append(2 * r + d)
                cols.append(2 * r + d)
                vals.append(1.0)
        return sp.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n)).tocsr()

    def merge_matrix(self) -> sp.csr_matrix:
        """0/1 map from merged unknowns to full dofs (matched triples share one)."""
        n = self.n_dofs
        rep = np.arange(n)
        for g in self.ids:
            rep[g] = g[0]
        # compress representative ids
        uniq, inv = np.unique(rep, return_inverse=True)
        rows = np.empty(2 * n, dtype=int)
        cols = np.empty(2 * n, dtype=int)
        rows[0::2] = 2 * np.arange(n)
        rows[1::2] = 2 * np.arange(n) + 1
        cols[0::2] = 2 * inv
        cols[1::2] = 2 * inv + 1
        data = np.ones(2 * n)
        return sp.coo_matrix((data, (rows, cols)), shape=(2 * n, 2 * uniq.size)).tocsr()


def expand_potentials(W_red: np.ndarray) -> np.ndarray:
    """(P, R-1) -> (P, R): append minus the row sums (pointwise zero-sum)."""
    W_red = np.atleast_2d(W_red)
    return np.column_stack((W_red, -W_red.sum(axis=1)))


def reduce_potentials(W: np.ndarray) -> np.ndarray:
    """Drop the final phase component."""
    W = np.atleast_2d(W)
    return W[:, :-1].copy()


@dataclass
class BlockSystem:
    """Assembled blocks of the reduced step system plus everything the
    solver and the stability check need to interpret a solution."""

    tau: float
    n_phases: int
    n_bulk: int                    # bulk vertices
    n_curve: int                   # curve scalar dofs
    A: sp.csr_matrix               # pure bulk stiffness (no BC)
    A_bc: sp.csr_matrix            # (R-1)*P square, Dirichlet rows replaced
    NhatT: sp.csr_matrix           # (R-1)*P x 2N, Dirichlet rows zeroed
    Bhat: sp.csr_matrix            # N x (R-1)*P
    C: np.ndarray                  # lumped masses (N,)
    Dbeta: sp.csr_matrix           # N x 2N
    Dmat: sp.csr_matrix            # 2N x N
    E: sp.csr_matrix               # 2N x 2N
    P: ProjectionP
    rhs_dirichlet: np.ndarray      # (R-1)*P
    X_flat: np.ndarray             # current vertex coordinates (2N,)
    masses: np.ndarray             # (N,)
    omega: np.ndarray              # (N, 2)
    dirichlet_nodes: np.ndarray
    w_values: np.ndarray

    @property
    def n_reduced(self) -> int:
        return (self.n_phases - 1) * self.n_bulk

    @property
    def n_unknowns(self) -> int:
        return self.n_reduced + 3 * self.n_curve

    def split(self, x: np.ndarray):
        k = self.n_reduced
        n = self.n_curve
        W = x[:k].reshape(self.n_phases - 1, self.n_bulk).T
        kappa = x[k:k + n]
        dX = x[k + n:]
        return W, kappa, dX

    def operator(self) -> sp.linalg.LinearOperator:
        """Matrix-free reduced operator with the projection composed in."""
        k, n = self.n_reduced, self.n_curve
        P = self.P

        def matvec(x):
            W = x[:k]
            kap = x[k:k + n]
            raw = x[k + n:]
            dX = P(raw)
            r1 = self.A_bc @ W + self.NhatT @ dX
            r2 = self.Bhat @ W + self.C * kap - self.Dbeta @ dX
            # the (raw - dX) term pins the junction-kernel component to
            # zero: it removes the operator's null space without touching
            # matched solutions, so iterative solvers see a nonsingular map
            r3 = P.adjoint(self.Dmat @ kap + self.E @ dX) + (raw - dX)
            return np.concatenate((r1, r2, r3))

        m = self.n_unknowns
        return sp.linalg.LinearOperator((m, m), matvec=matvec, dtype=float)

    def rhs(self) -> np.ndarray:
        r3 = -self.P.adjoint(self.E @ self.X_flat)
        return np.concatenate((self.rhs_dirichlet, np.zeros(self.n_curve), r3))

    def materialize_unprojected(self) -> sp.csr_matrix:
        """The same blocks with the projection dropped (preconditioner matrix)."""
        Cd = sp.diags(self.C)
        return sp.bmat(
            [
                [self.A_bc, None, self.NhatT],
                [self.Bhat, Cd, -self.Dbeta],
                [None, self.Dmat, self.E],
            ],
            format="csc",
        )

    def materialize_projected(self) -> sp.csr_matrix:
        """The reduced operator as an explicit sparse matrix.

        Same action as ``operator()``: projection composed into the
        displacement columns and curvature rows, with the junction-kernel
        pin term included.  Used for offline inspection dumps and tests.
        """
        Pm = self.P.matrix()
        eye = sp.eye(Pm.shape[0], format="csr")
        PT = Pm.T
        return sp.bmat(
            [
                [self.A_bc, None, self.NhatT @ Pm],
                [self.Bhat, sp.diags(self.C), -self.Dbeta @ Pm],
                [None, PT @ self.Dmat, PT @ self.E @ Pm + (eye - Pm)],
            ],
            format="csr",
        )

    def dump_matrix_market(self, path):
        """Write the reduced operator in Matrix Market format."""
        import scipy.io

        scipy.io.mmwrite(str(path), self.materialize_projected())

    def materialize_merged(self):
        """Square nonsingular system on junction-identified displacement dofs.

        Returns (matrix, rhs, R) with R the merge map; a solution y expands
        to dX = R y, exactly matched at the junctions.
        """
        R = self.P.merge_matrix()
        M = sp.bmat(
            [
                [self.A_bc, None, self.NhatT @ R],
                [self.Bhat, sp.diags(self.C), -self.Dbeta @ R],
                [None, R.T @ self.Dmat, R.T @ self.E @ R],
            ],
            format="csc",
        )
        rhs = np.concatenate(
            (
                self.rhs_dirichlet,
                np.zeros(self.n_curve),
                -(R.T @ (self.E @ self.X_flat)),
            )
        )
        return M, rhs, R

    def residual_parts(self, W_full: np.ndarray, kappa: np.ndarray, dX: np.ndarray):
        """Residuals of the three equation blocks for an expanded solution.

        ``W_full`` is (P, R); the motion-law residual is evaluated on the
        first R-1 components with Dirichlet rows excluded, matching the
        test space of the scheme.
        """
        W = W_full[:, :-1].T.ravel()
        dXp = self.P(dX)
        r1 = self.A_bc @ W + self.NhatT @ dXp - self.rhs_dirichlet
        r2 = self.Bhat @ W + self.C * kappa - self.Dbeta @ dXp
        r3 = self.P.adjoint(self.Dmat @ kappa + self.E @ (dXp + self.X_flat))
        return r1, r2, r3


def assemble_blocks(
    mesh: BulkMesh,
    network,
    anisotropies,
    mobilities,
    tau: float,
    boundary: BoundarySpec,
    lumped: bool = False,
    pieces=None,
) -> BlockSystem:
    """Assemble every block of the reduced system on (mesh, network).

    ``anisotropies`` and ``mobilities`` are per-curve lists; ``boundary``
    pins the reduced potential components on its Dirichlet nodes.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    I_R = network.n_phases
    I_S = network.n_curves
    if len(anisotropies) != I_S or len(mobilities) != I_S:
        raise ValueError("need one density and one mobility per curve")
    O = network.orientation
    P_bulk = mesh.n_vertices
    N = network.n_dofs
    off = network.offsets()

    A = assemble_stiffness(mesh)
    if pieces is None:
        pieces = clip_segments(mesh, network)
    Bc = assemble_cross_mass(mesh, network, lumped=lumped, pieces=pieces)

    masses = network.lumped_masses()
    omega = network.vertex_normals()

    # per-curve scalar-to-vector contraction with the vertex normal
    S_blocks = []
    for ci, curve in enumerate(network.curves):
        k = curve.n_vertices
        rows = np.repeat(np.arange(k), 2)
        cols = np.arange(2 * k)
        vals = omega[off[ci]:off[ci + 1]].ravel()
        S_blocks.append(sp.coo_matrix((vals, (rows, cols)), shape=(k, 2 * k)).tocsr())
    S = sp.block_diag(S_blocks, format="csr")

    # kinetic-undercooling weights: per vertex, sum of |s|/2 / beta(nu_s)
    dbeta_diag = np.zeros(N)
    any_rho = False
    for ci, curve in enumerate(network.curves):
        mob = mobilities[ci]
        if mob.rho == 0.0:
            continue
        any_rho = True
        seg = curve.segments
        ell = curve.segment_lengths()
        binv = 1.0 / mob.beta(curve.segment_normals())
        acc = np.zeros(curve.n_vertices)
        np.add.at(acc, seg[:, 0], 0.5 * ell * binv)
        np.add.at(acc, seg[:, 1], 0.5 * ell * binv)
        dbeta_diag[off[ci]:off[ci + 1]] = mob.rho * acc / tau
    Dbeta = (sp.diags(dbeta_diag) @ S).tocsr() if any_rho else sp.csr_matrix((N, 2 * N))

    Dmat = (S.T @ sp.diags(masses)).tocsr()
    E = _assemble_curve_stiffness(network, anisotropies)

    # reduced cross blocks: row blocks by curve, column blocks phase-major
    coef = O[:-1, :] - O[-1:, :]          # (R-1, I_S)
    Bhat = sp.bmat(
        [
            [
                (coef[l, c] * Bc[c]) if coef[l, c] else sp.csr_matrix(Bc[c].shape)
                for l in range(I_R - 1)
            ]
            for c in range(I_S)
        ],
        format="csr",
    )

    NT_blocks = []
    for l in range(I_R - 1):
        row = []
        for c in range(I_S):
            if O[l, c]:
                row.append((O[l, c] / tau) * (Bc[c].T @ S_blocks[c]))
            else:
                row.append(sp.csr_matrix((P_bulk, 2 * network.curves[c].n_vertices)))
        NT_blocks.append(row)
    NhatT = sp.bmat(NT_blocks, format="csr")

    # Dirichlet handling on the reduced potential rows
    dir_nodes = boundary.dirichlet_nodes(mesh)
    w_vals = boundary.w_values if boundary.w_values.size else np.zeros(I_R)
    if w_vals.size != I_R:
        raise ValueError("boundary value vector length must equal the phase count")
    A_bc = sp.block_diag([A] * (I_R - 1), format="csr")
    rhs_d = np.zeros((I_R - 1) * P_bulk)
    if dir_nodes.size:
        rows = np.concatenate([l * P_bulk + dir_nodes for l in range(I_R - 1)])
        A_bc = _replace_rows_identity(A_bc, rows)
        NhatT = _zero_rows(NhatT.tocsr(), rows)
        for l in range(I_R - 1):
            rhs_d[l * P_bulk + dir_nodes] = w_vals[l]

    proj = ProjectionP(network.junction_groups(), N)

    return BlockSystem(
        tau=tau,
        n_phases=I_R,
        n_bulk=P_bulk,
        n_curve=N,
        A=A,
        A_bc=A_bc.tocsr(),
        NhatT=NhatT.tocsr(),
        Bhat=Bhat.tocsr(),
        C=masses,
        Dbeta=Dbeta,
        Dmat=Dmat,
        E=E,
        P=proj,
        rhs_dirichlet=rhs_d,
        X_flat=network.all_vertices().ravel(),
        masses=masses,
        omega=omega,
        dirichlet_nodes=dir_nodes,
        w_values=np.asarray(w_vals, dtype=float),
    )


def _assemble_curve_stiffness(network, anisotropies) -> sp.csr_matrix:
    """Anisotropic stiffness: per segment and density component,
    gamma(nu) * s / |h| times the hat-difference pattern tensor the dual metric."""
    blocks = []
    for ci, curve in enumerate(network.curves):
        k = curve.n_vertices
        seg = curve.segments
        h = curve.chords()
        ell = curve.segment_lengths()
        gamma = anisotropies[ci]
        Ec = sp.csr_matrix((2 * k, 2 * k))
        for comp in gamma.components:
            gam, s = comp.segment_factors(h)
            wseg = gamma.scale * gam * s / ell
            rows = np.concatenate([seg[:, 0], seg[:, 1], seg[:, 0], seg[:, 1]])
            cols = np.concatenate([seg[:, 0], seg[:, 1], seg[:, 1], seg[:, 0]])
            vals = np.concatenate([wseg, wseg, -wseg, -wseg])
            L = sp.coo_matrix((vals, (rows, cols)), shape=(k, k)).tocsr()
            Ec = Ec + sp.kron(L, comp.dual, format="csr")
        blocks.append(Ec)
    return sp.block_diag(blocks, format="csr")


def _replace_rows_identity(M: sp.csr_matrix, rows: np.ndarray) -> sp.csr_matrix:
    M = _zero_rows(M.tocsr(), rows)
    n = M.shape[0]
    ident = sp.coo_matrix((np.ones(rows.size), (rows, rows)), shape=(n, M.shape[1]))
    return (M + ident).tocsr()


def _zero_rows(M: sp.csr_matrix, rows: np.ndarray) -> sp.csr_matrix:
    mask = np.ones(M.shape[0])
    mask[rows] = 0.0
    return (sp.diags(mask) @ M).tocsr()
