import numpy as np
import pytest
import scipy.sparse as sp

from vishape.fem import (
    AssemblyError,
    ElasticityTensor,
    Geometry,
    GeometryRate,
    SemilinearDensity,
    apply_dirichlet,
    assemble_bilinear,
    assemble_elasticity,
    assemble_elasticity_rate,
    assemble_load,
    assemble_semilinear,
    quadrature,
    ramp_profile,
    rigid_modes,
    stiffness,
    stiffness_profile,
)
from vishape.flow import translation_bump
from vishape.mesh import unit_square_mesh


def test_stiffness_kills_constants_and_is_symmetric():
    m = unit_square_mesh(5)
    K = stiffness(m, np.tile(np.eye(2), (m.n_triangles, 1, 1)))
    assert np.allclose(K @ np.ones(m.n_vertices), 0.0, atol=1e-12)
    assert abs(K - K.T).max() < 1e-14
    x = m.vertices[:, 0]
    assert x @ K @ x == pytest.approx(1.0)


def test_bilinear_mass_total():
    m = unit_square_mesh(4)
    B = assemble_bilinear(Geometry.reference(m), 2.0)
    one = np.ones(m.n_vertices)
    assert one @ B @ one == pytest.approx(2.0)


def test_bilinear_rejects_indefinite_coefficient():
    import dataclasses

    g = Geometry.reference(unit_square_mesh(2))
    bad = dataclasses.replace(g, A=-g.A)
    with pytest.raises(AssemblyError, match="not SPD"):
        assemble_bilinear(bad, 1.0)


def test_load_constant():
    m = unit_square_mesh(3)
    assert assemble_load(Geometry.reference(m), lambda p: np.full(len(p), 3.0)).sum() == pytest.approx(3.0)


def test_quadrature_rules_integrate_area():
    m = unit_square_mesh(3)
    for rule in ("vertex", "midpoint"):
        assert quadrature(m, rule).weight.sum() == pytest.approx(1.0)


def test_semilinear_derivative_matches_fd():
    m = unit_square_mesh(4)
    dens = SemilinearDensity.from_expression("u^3 + sin(x)*u")
    g = Geometry.reference(m)
    u = np.random.default_rng(0).standard_normal(m.n_vertices)
    d = np.random.default_rng(1).standard_normal(m.n_vertices)
    vec, J = assemble_semilinear(g, dens, u)
    h = 1e-6
    fd = (assemble_semilinear(g, dens, u + h * d)[0] - assemble_semilinear(g, dens, u - h * d)[0]) / (2 * h)
    assert np.allclose(J @ d, fd, atol=1e-6)


def test_monotone_check_rejects_decreasing_density():
    with pytest.raises(AssemblyError, match="not monotone"):
        SemilinearDensity.from_expression("-u").check_monotone(unit_square_mesh(2))


def test_geometry_rate_matches_fd():
    m = unit_square_mesh(4)
    X = translation_bump(amplitude=0.3)
    rate = GeometryRate.of(m, X)
    t = 1e-5
    g = Geometry.transported(m, X, t)
    assert np.allclose((g.A - np.eye(2)) / t, rate.Aprime, atol=1e-3)
    assert np.allclose((g.lumped - m.lumped_mass) / t, rate.lumped, atol=1e-3)


def test_dirichlet_elimination():
    m = unit_square_mesh(3)
    A = assemble_bilinear(Geometry.reference(m), 1.0)
    b = np.zeros(m.n_vertices)
    bd = m.boundary_nodes
    A2, b2 = apply_dirichlet(A, b, bd, np.full(len(bd), 2.0))
    u = sp.linalg.spsolve(sp.csc_matrix(A2), b2)
    assert np.allclose(u[bd], 2.0)
    assert abs(A2 - A2.T).max() < 1e-14


def test_stiffness_profile_shape():
    c = stiffness_profile(eta=0.05, delta=0.1)
    x = np.linspace(-1, 2, 601)
    assert c(1.0) == pytest.approx(1.0)
    # affine beyond 1 + delta
    assert c.d2(np.array([1.2, 1.8])) == pytest.approx([0.0, 0.0])
    assert c(0.0) == pytest.approx(0.05)
    assert np.all(c.d2(x) >= -1e-12)
    assert np.all(np.diff(c(x)) >= -1e-14)
    # C2: one-sided differences of the second derivative across the knots
    for k in c.pp.x[1:-1]:
        assert abs(c.d2(k - 1e-9) - c.d2(k + 1e-9)) < 1e-5


def test_ramp_profile():
    g = ramp_profile(beta=0.5, delta=0.1)
    assert g(-1.0) == 0.0
    assert g.d1(2.0) == pytest.approx(0.5)
    assert np.all(g.d1(np.linspace(-1, 2, 301)) >= -1e-14)


def test_elasticity_rigid_modes_in_kernel():
    m = unit_square_mesh(3)
    t = ElasticityTensor()
    K = assemble_elasticity(Geometry.reference(m), t, np.ones(m.n_vertices))
    R = rigid_modes(m)
    assert np.max(np.abs(K @ R.T)) < 1e-12
    assert abs(K - K.T).max() < 1e-13


def test_elasticity_rate_matches_fd():
    m = unit_square_mesh(4)
    X = translation_bump(amplitude=0.3)
    t = ElasticityTensor()
    rng = np.random.default_rng(3)
    chi = 0.5 + 0.5 * rng.random(m.n_vertices)
    chidot = rng.standard_normal(m.n_vertices)
    h = 1e-5
    Kp = assemble_elasticity(Geometry.transported(m, X, h), t, chi + h * chidot)
    Km = assemble_elasticity(Geometry.transported(m, X, -h), t, chi - h * chidot)
    fd = (Kp - Km) / (2 * h)
    rate = assemble_elasticity_rate(GeometryRate.of(m, X), t, chi, chidot)
    assert abs(fd - rate).max() < 1e-5
