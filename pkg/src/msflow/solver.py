"""Linear solvers for the per-step saddle-point system.

Default path: restarted GMRES on the projected operator, preconditioned by
a factorization of the same block matrix with the junction projection
dropped.  The projected operator differs from the unprojected one by a
low-rank perturbation (supported on the junction triples), so with an
exact factorization GMRES converges in a handful of iterations.

A merged-DOF direct solve is kept alongside: identifying the three matched
vertex unknowns per junction yields a square nonsingular system that a
sparse LU handles, giving bitwise junction matching.  It doubles as the
cross-validation oracle for the iterative path and as its fallback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .system_assembly import BlockSystem

logger = logging.getLogger(__name__)

__all__ = ["SolverConfig", "SolveStats", "build_lsq_preconditioner", "gmres_solve", "merged_dof_solve", "solve_step"]

METHODS = ("gmres+lsq-precond", "gmres+none", "merged-direct")


@dataclass
class SolverConfig:
    method: str = "gmres+lsq-precond"
    tol: float = 1e-10
    max_iters: int = 1000
    restart: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclass
class SolveStats:
    method: str
    iterations: int
    residual: float
    converged: bool
    fallback: bool = False


_PRECOND_SHIFT = 1e-6


def build_lsq_preconditioner(blocks: BlockSystem):
    """Factorize the unprojected block matrix as the preconditioner.

    Without the junction projection the block matrix is genuinely singular
    whenever a junction curve is straight (its tangential translation is
    invisible to every equation), and an unpivoted-for-that LU silently
    loses accuracy.  A tiny mass-scaled shift on the displacement block
    turns the factorization into a damped least-squares solve, which is
    all a preconditioner needs; if even that fails, the identity is used.
    """
    M0 = blocks.materialize_unprojected()
    k = blocks.n_reduced + blocks.n_curve
    e_scale = max(1.0, float(np.abs(blocks.E).max()))
    diag = np.concatenate(
        (np.zeros(k), _PRECOND_SHIFT * e_scale * np.repeat(blocks.masses, 2))
    )
    for boost in (1.0, 1e4):
        try:
            lu = spla.splu((M0 + sp.diags(boost * diag)).tocsc())
            test = lu.solve(np.ones(M0.shape[0]))
            if np.all(np.isfinite(test)):
                return spla.LinearOperator(M0.shape, matvec=lu.solve, dtype=float)
        except (RuntimeError, ValueError):
            continue
    logger.warning("preconditioner factorization failed; using identity")
    return None


def gmres_solve(operator, rhs: np.ndarray, precond, config: SolverConfig, x0=None):
    """Restarted GMRES; returns (solution, SolveStats with the true residual)."""
    count = {"n": 0}

    def cb(_):
        count["n"] += 1

    maxiter = max(1, int(np.ceil(config.max_iters / config.restart)))
    x, info = spla.gmres(
        operator,
        rhs,
        x0=x0,
        rtol=config.tol,
        atol=0.0,
        restart=config.restart,
        maxiter=maxiter,
        M=precond,
        callback=cb,
        callback_type="pr_norm",
    )
    bnorm = float(np.linalg.norm(rhs))
    res = float(np.linalg.norm(operator @ x - rhs)) / max(bnorm, 1e-300)
    converged = info == 0 and res <= 10.0 * config.tol
    return x, SolveStats("gmres", count["n"], res, converged)


def merged_dof_solve(blocks: BlockSystem):
    """Direct solve with junction triples identified into single unknowns.

    Returns (W_reduced_flat, kappa, dX_full, stats); dX is exactly matched
    at the junctions.  A singular merged matrix signals a degenerate
    configuration (vanishing vertex normals) and raises.
    """
    M, rhs, R = blocks.materialize_merged()
    try:
        lu = spla.splu(M)
    except RuntimeError as err:
        raise RuntimeError(
            "merged step system is singular; the curve configuration is degenerate"
        ) from err
    y = lu.solve(rhs)
    res = float(np.linalg.norm(M @ y - rhs) / max(np.linalg.norm(rhs), 1e-300))
    k = blocks.n_reduced
    n = blocks.n_curve
    W = y[:k]
    kappa = y[k:k + n]
    dX = R @ y[k + n:]
    return W, kappa, dX, SolveStats("merged-direct", 1, res, res < 1e-8)


def solve_step(blocks: BlockSystem, config: SolverConfig, precond=None, x0=None):
    """Solve one step system, honoring the configured method with fallback.

    Returns (W_reduced_flat, kappa, dX, stats).  The displacement is passed
    through the junction projection so the canonical matched representative
    is returned regardless of path.
    """
    if config.method == "merged-direct":
        W, kappa, dX, stats = merged_dof_solve(blocks)
        return W, kappa, blocks.P(dX), stats

    op = blocks.operator()
    rhs = blocks.rhs()
    if config.method == "gmres+lsq-precond" and precond is None:
        precond = build_lsq_preconditioner(blocks)
    M = precond if config.method == "gmres+lsq-precond" else None
    x, stats = gmres_solve(op, rhs, M, config, x0=x0)
    if not stats.converged:
        logger.warning(
            "GMRES stalled (residual %.3e after %d iterations); falling back to the merged direct solve",
            stats.residual,
            stats.iterations,
        )
        W, kappa, dX, mstats = merged_dof_solve(blocks)
        mstats.fallback = True
        return W, kappa, blocks.P(dX), mstats
    _, kappa, dX = blocks.split(x)
    return x[:blocks.n_reduced], kappa, blocks.P(dX), stats
