import numpy as np
import pytest

from msflow.anisotropy import (
    Anisotropy,
    AnisotropyComponent,
    Mobility,
    dual_metric,
    from_config,
    hexagonal,
    isotropic,
    rotation,
)

# values frozen from an independent evaluation of the three-fold rotated
# quadratic-form density at delta = 0.1 (see tests/oracles.py)
HEX01_AT_X = 2.0148891565092217
HEX01_AT_Y = 1.8349351572897474


def test_isotropic_is_euclidean_norm():
    gamma = isotropic()
    assert gamma(np.array([3.0, 4.0])) == pytest.approx(5.0, abs=1e-14)


def test_hex_unit_values_match_independent_script():
    gamma = hexagonal(0.1)
    assert gamma(np.array([1.0, 0.0])) == pytest.approx(HEX01_AT_X, abs=1e-12)
    assert gamma(np.array([0.0, 1.0])) == pytest.approx(HEX01_AT_Y, abs=1e-12)
    # the closed forms behind the frozen values
    assert HEX01_AT_X == pytest.approx(1 + 2 * np.sqrt(0.25 + 0.0075), abs=1e-15)
    assert HEX01_AT_Y == pytest.approx(0.1 + 2 * np.sqrt(0.75 + 0.0025), abs=1e-15)


def test_hex_delta_one_is_triple_euclidean():
    gamma = hexagonal(1.0)
    rng = np.random.default_rng(3)
    p = rng.normal(size=(20, 2))
    assert np.allclose(gamma(p), 3.0 * np.linalg.norm(p, axis=1), atol=1e-12)


def test_hexagonal_symmetry():
    gamma = hexagonal(0.1)
    R = rotation(np.pi / 3.0)
    rng = np.random.default_rng(7)
    p = rng.normal(size=(1000, 2))
    assert np.abs(gamma(p) - gamma(p @ R.T)).max() < 1e-12


def test_homogeneity_and_evenness():
    gamma = hexagonal(0.1, scale=0.7)
    rng = np.random.default_rng(11)
    for _ in range(50):
        p = rng.normal(size=2)
        lam = rng.normal()
        if lam == 0.0:
            continue
        assert gamma(lam * p) == pytest.approx(abs(lam) * gamma(p), rel=1e-12)
        assert gamma(-p) == gamma(p)


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        hexagonal(0.1)(np.zeros(2))


def test_delta_range_checked():
    with pytest.raises(ValueError):
        hexagonal(0.0)
    with pytest.raises(ValueError):
        hexagonal(1.5)


def test_component_triangle_inequality():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(2, 2))
    comp = AnisotropyComponent(M @ M.T + 0.5 * np.eye(2))
    for _ in range(200):
        p, q = rng.normal(size=2), rng.normal(size=2)
        assert comp(p + q) <= comp(p) + comp(q) + 1e-10


def test_dual_metric_values_and_involution():
    assert np.allclose(dual_metric(np.eye(2)), np.eye(2))
    d = 0.3
    assert np.allclose(dual_metric(np.diag([1.0, d**2])), np.diag([d**2, 1.0]))
    rng = np.random.default_rng(1)
    for _ in range(1000):
        M = rng.normal(size=(2, 2))
        G = M @ M.T + 0.1 * np.eye(2)
        Gt = dual_metric(G)
        assert np.linalg.det(Gt) == pytest.approx(np.linalg.det(G), rel=1e-12)
        assert np.abs(dual_metric(Gt) - G).max() < 1e-12 * max(1, np.abs(G).max())


def test_dual_metric_rejects_non_spd():
    with pytest.raises(ValueError):
        dual_metric(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(ValueError):
        dual_metric(np.array([[1.0, 0.5], [0.0, 1.0]]))  # unsymmetric


def test_segment_factors():
    comp = AnisotropyComponent(np.eye(2))
    gam, s = comp.segment_factors(np.array([[2.0, 0.0], [0.3, -1.2]]))
    assert np.allclose(s, 1.0)  # Euclidean metric leaves tangents unscaled
    d = 0.25
    comp = AnisotropyComponent(np.diag([1.0, d**2]))
    gam, s = comp.segment_factors(np.array([1.0, 0.0]))
    assert s[0] == pytest.approx(1.0 / d**2, rel=1e-12)
    assert gam[0] == pytest.approx(d, rel=1e-12)  # normal (0,1) hits the weak axis


def test_segment_factors_frame_invariance():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(2, 2))
    G = M @ M.T + 0.2 * np.eye(2)
    h = rng.normal(size=2)
    R = rotation(0.7321)
    base = AnisotropyComponent(G).segment_factors(h)
    rot = AnisotropyComponent(R.T @ G @ R).segment_factors(R.T @ h)
    assert base[0][0] == pytest.approx(rot[0][0], rel=1e-12)
    assert base[1][0] == pytest.approx(rot[1][0], rel=1e-12)


def test_mobility_positivity_and_rho():
    beta = Mobility(hexagonal(0.05), rho=0.3)
    th = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    nu = np.column_stack((np.cos(th), np.sin(th)))
    assert beta.beta(nu).min() > 0.0
    assert beta.rho == 0.3
    with pytest.raises(ValueError):
        Mobility(1.0, rho=-1.0)
    with pytest.raises(ValueError):
        Mobility(0.0)


def test_from_config():
    g = from_config({"type": "hex2d", "delta": 0.1, "scale": 2.0})
    assert g(np.array([1.0, 0.0])) == pytest.approx(2 * HEX01_AT_X, abs=1e-12)
    g = from_config({"type": "matrices", "matrices": [np.eye(2).tolist()]})
    assert g(np.array([0.0, -2.0])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        from_config({"type": "bogus"})


def test_scaled():
    g = hexagonal(0.1).scaled(3.0)
    assert g(np.array([1.0, 0.0])) == pytest.approx(3 * HEX01_AT_X, abs=1e-11)
