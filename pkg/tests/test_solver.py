import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from msflow.anisotropy import Mobility, hexagonal, isotropic
from msflow.bulk_mesh import AdaptParams, BoundarySpec, adapt, build_initial
from msflow.curve_network import Curve, CurveNetwork
from msflow.simulation import make_initial
from msflow.solver import (
    SolverConfig,
    build_lsq_preconditioner,
    gmres_solve,
    merged_dof_solve,
    solve_step,
)
from msflow.system_assembly import assemble_blocks


@pytest.fixture(scope="module")
def coarse_example1():
    net = make_initial(
        {
            "kind": "double_bubble_plus_disk",
            "areas": [3.139, 3.139],
            "radius": 0.625,
            "center": [-0.7, 0.0],
            "disk_center": [2.2, 0.0],
        },
        {"vertices_per_curve": 16},
    )
    mesh = adapt(build_initial(2), net, AdaptParams(8 / 32, 8 / 8, 0.5))
    blocks = assemble_blocks(
        mesh,
        net,
        [hexagonal(0.1)] * 4,
        [Mobility(1.0, 0.0)] * 4,
        1e-3,
        BoundarySpec("none", np.zeros(3)),
    )
    return net, mesh, blocks


def test_gmres_identity_one_iteration():
    op = spla.aslinearoperator(sp.eye(10, format="csr"))
    b = np.arange(10.0)
    x, stats = gmres_solve(op, b, None, SolverConfig())
    assert stats.iterations <= 1
    assert np.allclose(x, b)


def test_gmres_spd_diag():
    op = spla.aslinearoperator(sp.diags([1.0, 4.0]))
    x, stats = gmres_solve(op, np.array([1.0, 4.0]), None, SolverConfig())
    assert np.allclose(x, [1.0, 1.0], atol=1e-10)
    assert stats.converged


def test_invalid_config():
    with pytest.raises(ValueError):
        SolverConfig(method="bogus")
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)


def test_preconditioner_zero_maps_to_zero(coarse_example1):
    _, _, blocks = coarse_example1
    pre = build_lsq_preconditioner(blocks)
    assert np.abs(pre @ np.zeros(blocks.n_unknowns)).max() == 0.0


def test_preconditioned_beats_unpreconditioned(coarse_example1):
    _, _, blocks = coarse_example1
    op, rhs = blocks.operator(), blocks.rhs()
    pre = build_lsq_preconditioner(blocks)
    cfg = SolverConfig(max_iters=3000, restart=150)
    _, with_pre = gmres_solve(op, rhs, pre, cfg)
    _, without = gmres_solve(op, rhs, None, cfg)
    assert with_pre.converged
    assert with_pre.iterations <= without.iterations
    assert with_pre.iterations <= 200


def test_merged_equals_projected_gmres(coarse_example1):
    _, _, blocks = coarse_example1
    Wm, km, dXm, ms = merged_dof_solve(blocks)
    assert ms.residual < 1e-10
    pre = build_lsq_preconditioner(blocks)
    x, gs = gmres_solve(blocks.operator(), blocks.rhs(), pre, SolverConfig(tol=1e-11))
    assert gs.converged and gs.residual <= 1e-10
    n, k = blocks.n_curve, blocks.n_reduced
    assert np.abs(x[:k] - Wm).max() < 1e-8
    assert np.abs(x[k:k + n] - km).max() < 1e-8
    assert np.abs(blocks.P(x[k + n:]) - blocks.P(dXm)).max() < 1e-8


def test_merged_junction_values_bitwise(coarse_example1):
    net, _, blocks = coarse_example1
    _, _, dX, _ = merged_dof_solve(blocks)
    v = dX.reshape(-1, 2)
    for ids, _w in zip(blocks.P.ids, blocks.P.w):
        assert np.array_equal(v[ids[0]], v[ids[1]])
        assert np.array_equal(v[ids[0]], v[ids[2]])


def test_no_junction_paths_agree():
    th = np.linspace(0, 2 * np.pi, 32, endpoint=False)
    net = CurveNetwork(
        [Curve(np.column_stack((1.5 * np.cos(th), np.sin(th))), True, "c")],
        [],
        [[-1], [1]],
        1,
    )
    mesh = adapt(build_initial(2), net, AdaptParams(8 / 32, 8 / 8, 0.5))
    blocks = assemble_blocks(
        mesh, net, [isotropic()], [Mobility(1.0, 0.0)], 1e-3, BoundarySpec("none", np.zeros(2))
    )
    W1, k1, d1, _ = merged_dof_solve(blocks)
    W2, k2, d2, s2 = solve_step(blocks, SolverConfig(tol=1e-12))
    assert s2.method == "gmres"
    assert np.abs(W1 - W2).max() < 1e-8
    assert np.abs(k1 - k2).max() < 1e-8
    assert np.abs(d1 - d2).max() < 1e-8


def test_solution_satisfies_reassembled_equations(coarse_example1):
    net, mesh, blocks = coarse_example1
    cfg = SolverConfig()
    W_red, kappa, dX, stats = solve_step(blocks, cfg)
    from msflow.system_assembly import expand_potentials

    W_full = expand_potentials(W_red.reshape(net.n_phases - 1, mesh.n_vertices).T)
    # independently re-assembled blocks, residuals of all three equations
    blocks2 = assemble_blocks(
        mesh,
        net,
        [hexagonal(0.1)] * 4,
        [Mobility(1.0, 0.0)] * 4,
        1e-3,
        BoundarySpec("none", np.zeros(3)),
    )
    r1, r2, r3 = blocks2.residual_parts(W_full, kappa, dX)
    scale = np.linalg.norm(blocks2.rhs())
    worst = max(np.abs(r1).max(), np.abs(r2).max(), np.abs(r3).max())
    assert worst <= 10 * cfg.tol * max(1.0, scale)


def test_solver_deterministic(coarse_example1):
    _, _, blocks = coarse_example1
    cfg = SolverConfig()
    a = solve_step(blocks, cfg)
    b = solve_step(blocks, cfg)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert np.array_equal(a[2], b[2])


def test_merged_direct_config_path(coarse_example1):
    _, _, blocks = coarse_example1
    W, kappa, dX, stats = solve_step(blocks, SolverConfig(method="merged-direct"))
    assert stats.method == "merged-direct"
    assert stats.residual < 1e-10


def test_merged_system_nonsingular(coarse_example1):
    """Unique solvability of the step system on a well-posed configuration:
    the junction-identified matrix has no near-null singular values."""
    _, _, blocks = coarse_example1
    M, _, _ = blocks.materialize_merged()
    s = np.linalg.svd(M.toarray(), compute_uv=False)
    assert s[-1] > 1e-10 * s[0]


def test_gmres_failure_falls_back_to_merged(coarse_example1):
    _, _, blocks = coarse_example1
    cfg = SolverConfig(method="gmres+none", max_iters=1, restart=1)
    W, kappa, dX, stats = solve_step(blocks, cfg)
    assert stats.fallback
    assert stats.method == "merged-direct"
    assert stats.residual < 1e-8


@pytest.mark.slow
def test_first_step_iterations_default_resolution():
    """Regression bound: the first step of the disk-coarsening preset at
    default resolution converges within 200 preconditioned iterations."""
    net = make_initial(
        {
            "kind": "double_bubble_plus_disk",
            "areas": [3.139, 3.139],
            "radius": 0.625,
            "center": [-0.7, 0.0],
            "disk_center": [2.2, 0.0],
        },
        {},  # default vertices per unit length
    )
    mesh = adapt(build_initial(2), net, AdaptParams(8 / 128, 8 / 16, 2 * 8 / 128))
    blocks = assemble_blocks(
        mesh,
        net,
        [hexagonal(0.1)] * 4,
        [Mobility(1.0, 0.0)] * 4,
        1e-3,
        BoundarySpec("none", np.zeros(3)),
    )
    pre = build_lsq_preconditioner(blocks)
    _, stats = gmres_solve(blocks.operator(), blocks.rhs(), pre, SolverConfig())
    assert stats.converged
    assert stats.iterations <= 200
