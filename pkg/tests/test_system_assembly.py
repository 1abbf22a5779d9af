import numpy as np
import pytest
import scipy.sparse as sp

from msflow.anisotropy import Mobility, hexagonal, isotropic
from msflow.bulk_mesh import AdaptParams, BoundarySpec, adapt, build_initial
from msflow.coupling import assemble_cross_mass
from msflow.curve_network import Curve, CurveNetwork
from msflow.simulation import make_initial
from msflow.system_assembly import (
    ProjectionP,
    assemble_blocks,
    expand_potentials,
    reduce_potentials,
)

TAU = 1e-3


@pytest.fixture(scope="module")
def db():
    net = make_initial(
        {"kind": "double_bubble", "areas": [2.0, 2.0]}, {"vertices_per_curve": 16}
    )
    mesh = adapt(build_initial(2), net, AdaptParams(8 / 32, 8 / 8, 0.5))
    return net, mesh


def blocks_for(net, mesh, rho=0.0, boundary=None, gamma=None):
    gamma = gamma or [hexagonal(0.1)] * net.n_curves
    mobs = [Mobility(1.0, rho)] * net.n_curves
    boundary = boundary or BoundarySpec("none", np.zeros(net.n_phases))
    return assemble_blocks(mesh, net, gamma, mobs, TAU, boundary)


def test_reduced_cross_block_signs(db):
    """With the printed three-phase orientation matrix the reduced coupling
    must come out as (B1, 2B1; -2B2, -B2; B3, -B3)."""
    net, mesh = db
    assert net.orientation.tolist() == [[0, -1, 1], [1, 0, -1], [-1, 1, 0]]
    blocks = blocks_for(net, mesh)
    Bc = assemble_cross_mass(mesh, net)
    P = mesh.n_vertices
    off = net.offsets()
    expected = sp.bmat(
        [
            [1 * Bc[0], 2 * Bc[0]],
            [-2 * Bc[1], -1 * Bc[1]],
            [1 * Bc[2], -1 * Bc[2]],
        ]
    ).tocsr()
    assert abs(blocks.Bhat - expected).max() < 1e-14


def test_rho_zero_gives_zero_kinetic_block(db):
    net, mesh = db
    blocks = blocks_for(net, mesh, rho=0.0)
    assert blocks.Dbeta.nnz == 0
    blocks = blocks_for(net, mesh, rho=1.0)
    assert blocks.Dbeta.nnz > 0


def test_isotropic_stiffness_matches_hand_assembly():
    """Three-segment open polyline: the classical curve Laplacian pattern
    (1/length weights) tensored with the identity."""
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [3.0, 2.0]])
    c = Curve(pts, False)
    # close it into a network via a dummy triangle of other curves is
    # overkill; assemble through the internal helper instead
    from msflow.system_assembly import _assemble_curve_stiffness

    net = CurveNetwork(
        [Curve(np.array([[0, 0], [1, 0], [1, 2], [3, 2], [0, 3]]), True, "c")],
        [],
        [[-1], [1]],
        1,
    )
    E = _assemble_curve_stiffness(net, [isotropic()]).toarray()
    ell = net.curves[0].segment_lengths()
    k = net.curves[0].n_vertices
    L = np.zeros((k, k))
    seg = net.curves[0].segments
    for s in range(seg.shape[0]):
        a, b = seg[s]
        w = 1.0 / ell[s]
        L[a, a] += w
        L[b, b] += w
        L[a, b] -= w
        L[b, a] -= w
    assert np.abs(E - np.kron(L, np.eye(2))).max() < 1e-13


def test_E_symmetric_positive_semidefinite(db):
    net, mesh = db
    blocks = blocks_for(net, mesh)
    E = blocks.E
    assert abs(E - E.T).max() < 1e-12
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(size=E.shape[0])
        assert x @ (E @ x) >= -1e-12 * (x @ x)
    # constants are annihilated: curve-wise rigid shifts
    shift = np.tile([0.3, -0.7], blocks.n_curve)
    assert np.abs(E @ shift).max() < 1e-12


def test_apply_P_weighted_average_and_idempotence(db):
    net, mesh = db
    blocks = blocks_for(net, mesh)
    P = blocks.P
    rng = np.random.default_rng(6)
    v = rng.normal(size=2 * blocks.n_curve)
    Pv = P(v)
    assert np.abs(P(Pv) - Pv).max() < 1e-13
    # matched input unchanged
    assert np.abs(P(Pv) - Pv).max() < 1e-13
    # triple becomes the mass-weighted average
    ids, w = P.ids[0], P.w[0]
    vv = v.reshape(-1, 2)
    avg = (w[:, None] * vv[ids]).sum(axis=0)
    assert np.allclose(Pv.reshape(-1, 2)[ids], avg[None, :])
    # equal masses -> plain mean
    Peq = ProjectionP([(np.array([0, 1, 2]), np.array([2.0, 2.0, 2.0]))], 4)
    out = Peq(np.arange(8.0))
    assert np.allclose(out.reshape(-1, 2)[:3].mean(axis=0), out.reshape(-1, 2)[0])
    assert np.allclose(out.reshape(-1, 2)[0], [2.0, 3.0])


def test_apply_P_mass_symmetry_and_nonexpansion(db):
    net, mesh = db
    blocks = blocks_for(net, mesh)
    P = blocks.P
    M = np.repeat(blocks.masses, 2)
    rng = np.random.default_rng(13)
    u = rng.normal(size=2 * blocks.n_curve)
    v = rng.normal(size=2 * blocks.n_curve)
    assert (P(u) * M) @ v == pytest.approx((u * M) @ P(v), rel=1e-12)
    assert (P(u) * M) @ P(u) <= (u * M) @ u + 1e-12


def test_adjoint_is_euclidean_transpose(db):
    net, mesh = db
    blocks = blocks_for(net, mesh)
    P = blocks.P
    rng = np.random.default_rng(17)
    u = rng.normal(size=2 * blocks.n_curve)
    v = rng.normal(size=2 * blocks.n_curve)
    assert P(u) @ v == pytest.approx(u @ P.adjoint(v), rel=1e-12)


def test_reduce_expand():
    assert expand_potentials(np.array([[1.0, 1.0]])).tolist() == [[1.0, 1.0, -2.0]]
    W = np.array([[20.0, 10.0, -30.0]])
    assert reduce_potentials(W).tolist() == [[20.0, 10.0]]
    rng = np.random.default_rng(0)
    R = rng.normal(size=(7, 2))
    full = expand_potentials(R)
    assert np.abs(full.sum(axis=1)).max() < 1e-12
    assert np.array_equal(reduce_potentials(full), R)


def test_operator_equals_matrix_without_junctions():
    """For a single closed curve the projection is trivial and the reduced
    operator must coincide with the materialized unprojected matrix."""
    th = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    net = CurveNetwork(
        [Curve(np.column_stack((np.cos(th), np.sin(th))), True, "c")], [], [[-1], [1]], 1
    )
    mesh = adapt(build_initial(2), net, AdaptParams(8 / 32, 8 / 8, 0.5))
    blocks = assemble_blocks(
        mesh, net, [isotropic()], [Mobility(1.0, 0.5)], TAU, BoundarySpec("none", np.zeros(2))
    )
    assert blocks.P.trivial
    op = blocks.operator()
    M0 = blocks.materialize_unprojected()
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.normal(size=blocks.n_unknowns)
        assert np.abs(op @ x - M0 @ x).max() < 1e-11


def test_unreduced_formulation_near_singularity(db):
    """The unreduced potential formulation (all phases kept, zero-sum
    enforced by projection) maps every constant-in-phase-direction field to
    zero, so its kernel is at least the scalar bulk space."""
    net, mesh = db
    blocks = blocks_for(net, mesh)
    A = blocks.A
    P_bulk = mesh.n_vertices
    R = net.n_phases
    rng = np.random.default_rng(21)
    zeta = rng.normal(size=P_bulk)
    W_unred = np.tile(zeta, R)  # same scalar field in every phase component
    # motion-law rows of the unreduced system: Q (A_Omega W + cross terms);
    # with kappa = dX = 0 only Q A_Omega W survives, and Q kills the
    # phase-constant direction pointwise
    AW = np.concatenate([A @ W_unred[l * P_bulk:(l + 1) * P_bulk] for l in range(R)])
    Q_AW = AW - np.tile(AW.reshape(R, P_bulk).mean(axis=0), R)
    assert np.abs(Q_AW).max() < 1e-12
    # constant displacement shift lies in the curvature-block kernel
    shift = np.tile([1.0, -2.0], blocks.n_curve)
    assert np.abs(blocks.E @ shift).max() < 1e-12


def test_materialized_projected_matches_operator(db):
    net, mesh = db
    blocks = blocks_for(net, mesh, rho=0.4)
    op = blocks.operator()
    M = blocks.materialize_projected()
    rng = np.random.default_rng(31)
    for _ in range(6):
        x = rng.normal(size=blocks.n_unknowns)
        assert np.abs(op @ x - M @ x).max() < 1e-11


def test_matrix_market_dump(db, tmp_path):
    net, mesh = db
    blocks = blocks_for(net, mesh)
    path = tmp_path / "operator.mtx"
    blocks.dump_matrix_market(path)
    import scipy.io

    M = scipy.io.mmread(str(path)).tocsr()
    assert M.shape == (blocks.n_unknowns, blocks.n_unknowns)
    assert abs(M - blocks.materialize_projected()).max() < 1e-14


def test_tau_scaling_of_blocks(db):
    net, mesh = db
    gamma = [hexagonal(0.1)] * 3
    mobs = [Mobility(1.0, 0.7)] * 3
    bc = BoundarySpec("none", np.zeros(3))
    b1 = assemble_blocks(mesh, net, gamma, mobs, TAU, bc)
    b2 = assemble_blocks(mesh, net, gamma, mobs, 2 * TAU, bc)
    assert abs(b1.NhatT - 2 * b2.NhatT).max() < 1e-12
    assert abs(b1.Dbeta - 2 * b2.Dbeta).max() < 1e-12
    assert abs(b1.E - b2.E).max() == 0.0


def test_dirichlet_rows(db):
    net, mesh = db
    w_D = np.array([2.0, 1.0, -3.0])
    blocks = blocks_for(net, mesh, boundary=BoundarySpec("all", w_D))
    nodes = blocks.dirichlet_nodes
    assert nodes.size > 0
    P_bulk = mesh.n_vertices
    rhs = blocks.rhs()
    for l, val in enumerate([2.0, 1.0]):  # reduced components only
        rows = l * P_bulk + nodes
        assert np.all(rhs[rows] == val)
        for r in rows[:3]:
            row = blocks.A_bc.getrow(r)
            assert row.nnz == 1 and row[0, r] == 1.0
            assert blocks.NhatT.getrow(r).nnz == 0


def test_dimension_mismatch_errors(db):
    net, mesh = db
    with pytest.raises(ValueError):
        assemble_blocks(
            mesh, net, [isotropic()], [Mobility()], TAU, BoundarySpec("none", np.zeros(3))
        )
    with pytest.raises(ValueError):
        blocks_for(net, mesh, boundary=BoundarySpec("none", np.zeros(5)))
    with pytest.raises(ValueError):
        assemble_blocks(
            mesh,
            net,
            [hexagonal(0.1)] * 3,
            [Mobility()] * 3,
            -1.0,
            BoundarySpec("none", np.zeros(3)),
        )
