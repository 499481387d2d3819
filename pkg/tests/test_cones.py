import numpy as np
import pytest

from conftest import demo_problem
from vishape.cones import (
    ConeError,
    DiscreteCone,
    boundary_form_value,
    cone_vi,
    fd_material_oracle,
    solve_material_derivative,
    state_shape_derivative,
    tangent_kern_cone,
)
from vishape.flow import VectorField
from vishape.mesh import unit_square_mesh
from vishape.vi import solve_obstacle_semilinear, solve_transported

TS = [2.0**-k for k in (3, 6, 9, 12)]


def test_cone_overlap_rejected():
    e = np.array([True, False])
    with pytest.raises(ConeError):
        DiscreteCone(e, e.copy(), np.zeros(2))


def test_cone_membership():
    c = DiscreteCone(np.array([True, False, False]), np.array([False, True, False]), np.array([1.0, 2.0, 0.0]))
    assert c.contains([1.0, 1.5, 100.0])
    assert c.violations([1.1, 2.5, 0.0]) == {"equality": pytest.approx(0.1), "inequality": pytest.approx(0.5)}
    assert DiscreteCone.whole_space(3).contains(np.arange(3.0))


def test_cone_vi_identity_projection():
    import scipy.sparse as sp

    c = DiscreteCone(np.array([True, False, False]), np.array([False, True, False]), np.array([1.0, 0.5, 0.0]))
    sol = cone_vi(sp.identity(3, format="csr"), np.array([3.0, 2.0, -4.0]), c)
    assert np.allclose(sol.state, [1.0, 0.5, -4.0])
    assert sol.multiplier[1] == pytest.approx(1.5)


def test_cone_from_solution_partitions_contact(bump):
    prob = demo_problem(8)
    sol = solve_obstacle_semilinear(prob, tol=1e-10)
    cone = tangent_kern_cone(sol, prob.obstacle_rate(bump))
    assert np.array_equal(cone.equality | cone.inequality, sol.contact)
    strict = tangent_kern_cone(sol, prob.obstacle_rate(bump), strict=True)
    assert not strict.inequality.any()


def test_material_derivative_in_cone_and_fd(bump):
    prob = demo_problem(16)
    table = fd_material_oracle(prob, bump, TS)
    md = table.derivative
    assert md.cone.contains(md.udot, 1e-8)
    assert table.monotone
    assert table.rows[-1].error_h1 <= 5e-3
    assert table.to_csv().splitlines()[0] == "t,error_h1,quotient_norm"


def test_material_derivative_positively_homogeneous(bump):
    prob = demo_problem(8)
    sol = solve_transported(prob, bump, 0.0, tol=1e-10)
    a = solve_material_derivative(prob, sol, bump).udot
    b = solve_material_derivative(prob, sol, bump.scaled(2.0)).udot
    assert np.allclose(b, 2 * a, atol=1e-10)


def test_zero_field_gives_zero_derivative():
    prob = demo_problem(8)
    sol = solve_transported(prob, VectorField.zero(), 0.0, tol=1e-10)
    md = solve_material_derivative(prob, sol, VectorField.zero())
    assert np.allclose(md.udot, 0.0, atol=1e-12)


def test_shape_derivative_of_translation_invariant_state():
    m = unit_square_mesh(4)
    u = 1.0 + 2.0 * m.vertices[:, 0]
    X = VectorField.from_expressions("1", "0")
    # u-dot for a pure translation of a linear function is grad u . X, so u' vanishes
    assert np.allclose(state_shape_derivative(np.full(m.n_vertices, 2.0), u, X, m), 0.0)


def test_boundary_form_constant_state():
    m = unit_square_mesh(8)
    X = VectorField.from_expressions("x", "0")
    val = boundary_form_value(np.full(m.n_vertices, 2.0), None, X, np.full(m.n_vertices, 3.0), m, 1.0)
    # only the x = 1 edge carries X.n = 1: -(1 * 2) * 3 * 1
    assert val == pytest.approx(-6.0)


def test_boundary_form_only_static():
    m = unit_square_mesh(2)
    with pytest.raises(ConeError):
        boundary_form_value(np.zeros(9), None, VectorField.zero(), np.zeros(9), m, 1.0, mode="moving")
