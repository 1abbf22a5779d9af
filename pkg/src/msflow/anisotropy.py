"""Orientation-dependent surface energy densities and mobilities.

The densities supported here are finite sums of Riemannian norms,

    gamma(p) = scale * sum_l sqrt(p . G_l p),

with every G_l a 2x2 symmetric positive definite matrix.  The family is
convex, even and absolutely 1-homogeneous, and it is exactly the class for
which the curve evolution scheme admits a linear per-segment stiffness
form; arbitrary smooth densities are deliberately not supported.  The
smoothed-hexagon density used by the crystal-growth presets is a member
with three rotated components.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "AnisotropyComponent",
    "Anisotropy",
    "Mobility",
    "dual_metric",
    "isotropic",
    "hexagonal",
    "rotation",
    "from_config",
]

_SYM_TOL = 1e-12


def rotation(theta: float) -> np.ndarray:
    """Rotation matrix [[cos, sin], [-sin, cos]] used to orient components."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def dual_metric(G) -> np.ndarray:
    """Return det(G) * inv(G) for a 2x2 SPD matrix.

    This is the metric in which tangents are measured inside the
    anisotropic stiffness form.  For 2x2 matrices it equals the adjugate,
    so it is computed division-free and is an exact involution:
    dual_metric(dual_metric(G)) == G and det(dual) == det(G).
    """
    G = _check_spd(np.asarray(G, dtype=float))
    return np.array([[G[1, 1], -G[0, 1]], [-G[1, 0], G[0, 0]]])


def _check_spd(G: np.ndarray) -> np.ndarray:
    if G.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {G.shape}")
    scale = max(1.0, float(np.abs(G).max()))
    if abs(G[0, 1] - G[1, 0]) > _SYM_TOL * scale:
        raise ValueError("matrix must be symmetric")
    G = 0.5 * (G + G.T)
    # 2x2 SPD iff trace and determinant positive
    det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
    if det <= 0.0 or G[0, 0] + G[1, 1] <= 0.0:
        raise ValueError("matrix must be positive definite")
    return G


class AnisotropyComponent:
    """One Riemannian norm p -> sqrt(p . G p) with its cached dual metric."""

    __slots__ = ("G", "dual")

    def __init__(self, G):
        self.G = _check_spd(np.asarray(G, dtype=float))
        self.dual = dual_metric(self.G)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        """Evaluate sqrt(p . G p); p may be a (2,) vector or (n, 2) batch."""
        p = np.asarray(p, dtype=float)
        q = np.einsum("...i,ij,...j->...", p, self.G, p)
        return np.sqrt(q)

    def segment_factors(self, h: np.ndarray):
        """Per-segment weight pair (gamma(nu), s) for chord vectors h.

        For a segment with chord h the normal is nu = perp(h)/|h| and
        s = |h|^2 / (h . dual h) rescales the flat tangential derivative to
        the dual-metric-orthonormal one.  The segment's stiffness
        contribution is then gamma(nu) * s / |h| times the hat-gradient
        pattern tensored with the dual metric.
        """
        h = np.atleast_2d(np.asarray(h, dtype=float))
        hh = np.einsum("ki,ki->k", h, h)
        if np.any(hh == 0.0):
            raise ValueError("zero-length segment")
        nu = np.column_stack((-h[:, 1], h[:, 0])) / np.sqrt(hh)[:, None]
        gam = self(nu)
        s = hh / np.einsum("ki,ij,kj->k", h, self.dual, h)
        return gam, s


class Anisotropy:
    """Sum of Riemannian-norm components with an optional global scale."""

    __slots__ = ("components", "scale")

    def __init__(self, components, scale: float = 1.0):
        if len(components) < 1:
            raise ValueError("need at least one component")
        if scale <= 0.0:
            raise ValueError("scale must be positive")
        self.components = [
            c if isinstance(c, AnisotropyComponent) else AnisotropyComponent(c)
            for c in components
        ]
        self.scale = float(scale)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        """Evaluate the density; rejects the zero vector (only normals are ever passed)."""
        p = np.asarray(p, dtype=float)
        if np.any(np.einsum("...i,...i->...", p, p) == 0.0):
            raise ValueError("density is not evaluated at p = 0")
        return self.scale * sum(c(p) for c in self.components)

    def scaled(self, factor: float) -> "Anisotropy":
        """Same components with the scale multiplied by ``factor``."""
        return Anisotropy(self.components, self.scale * factor)


def isotropic(scale: float = 1.0) -> Anisotropy:
    """The Euclidean density scale * |p|."""
    return Anisotropy([np.eye(2)], scale)


def from_config(spec: dict) -> Anisotropy:
    """Build a density from its configuration entry.

    Recognized forms: {"type": "isotropic", "scale": s},
    {"type": "hex2d", "delta": d, "scale": s} and
    {"type": "matrices", "matrices": [[..2x2..], ...], "scale": s}.
    """
    kind = spec.get("type")
    scale = float(spec.get("scale", 1.0))
    if kind == "isotropic":
        return isotropic(scale)
    if kind == "hex2d":
        return hexagonal(float(spec.get("delta", 0.1)), scale)
    if kind == "matrices":
        return Anisotropy([np.asarray(m, dtype=float) for m in spec["matrices"]], scale)
    raise ValueError(f"unknown anisotropy type {kind!r}")


def hexagonal(delta: float, scale: float = 1.0) -> Anisotropy:
    """Smoothed-hexagon density: three components diag(1, delta^2) rotated by 60 degrees.

    Component l uses G_l = (R^l)^T diag(1, delta^2) R^l with R the 60-degree
    rotation, l = 1, 2, 3.  Small delta sharpens the corners of the
    associated equilibrium shape; delta = 1 degenerates to 3 * |p|.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    D = np.diag([1.0, delta**2])
    R = rotation(np.pi / 3.0)
    comps = []
    Rl = np.eye(2)
    for _ in range(3):
        Rl = R @ Rl
        comps.append(Rl.T @ D @ Rl)
    return Anisotropy(comps, scale)


class Mobility:
    """Orientation-dependent mobility beta(nu) plus the kinetic coefficient rho.

    ``beta`` is either a positive constant or the same quadratic-form family
    as the energy densities; it must be positive on the unit circle.  ``rho``
    scales the kinetic undercooling term and may be zero.
    """

    __slots__ = ("beta_const", "beta_form", "rho")

    def __init__(self, beta=1.0, rho: float = 0.0):
        if rho < 0.0:
            raise ValueError("rho must be nonnegative")
        self.rho = float(rho)
        if isinstance(beta, Anisotropy):
            self.beta_const = None
            self.beta_form = beta
        else:
            beta = float(beta)
            if beta <= 0.0:
                raise ValueError("constant mobility must be positive")
            self.beta_const = beta
            self.beta_form = None

    def beta(self, nu: np.ndarray) -> np.ndarray:
        """Evaluate beta at (unit) directions nu, shape (n, 2) or (2,)."""
        nu = np.asarray(nu, dtype=float)
        if self.beta_form is None:
            return np.full(nu.shape[:-1], self.beta_const)
        return self.beta_form(nu)
