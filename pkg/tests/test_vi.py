import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import demo_problem
from vishape.fem import SemilinearDensity
from vishape.mesh import unit_square_mesh
from vishape.vi import (
    AlgebraicVI,
    ObstacleProblem,
    SolverError,
    brute_force_vi,
    energy,
    kkt_residuals,
    p_laplace_energy,
    pdas,
    solve_obstacle_semilinear,
    solve_p_laplace,
    solve_transported,
)


def test_density_pushes_onto_obstacle():
    # w = u - 1 with psi = 0: unconstrained minimiser 1/2 is cut to 0, mu equals the lumped mass
    m = unit_square_mesh(4)
    sol = solve_obstacle_semilinear(ObstacleProblem(m, 1.0, SemilinearDensity.from_expression("u - 1"), 0.0))
    assert np.allclose(sol.state, 0.0, atol=1e-12)
    assert np.allclose(sol.multiplier, m.lumped_mass, atol=1e-12)
    assert sol.strongly_active.all()


def test_inactive_constant_solution():
    # w = u + 1, lam = 1, no load: u + u + 1 = 0 everywhere gives u = -1/2
    m = unit_square_mesh(4)
    sol = solve_obstacle_semilinear(ObstacleProblem(m, 1.0, SemilinearDensity.from_expression("u + 1"), 0.0))
    assert np.allclose(sol.state, -0.5, atol=1e-12)
    assert np.all(sol.multiplier == 0.0)
    assert sol.inactive.all()


def test_no_obstacle_zero_data():
    m = unit_square_mesh(3)
    sol = solve_obstacle_semilinear(ObstacleProblem(m, 1.0))
    assert np.all(sol.state == 0.0)


def test_demo_kkt():
    sol = solve_obstacle_semilinear(demo_problem(8))
    r = sol.residuals
    assert max(r["feasibility"], r["sign"], r["complementarity"], r["stationarity"]) <= 1e-8
    assert sol.contact.any() and sol.inactive.any()


def _random_system(rng, n_free=3, n_con=6):
    n = n_free + n_con
    B = rng.standard_normal((n, n))
    K = sp.csr_matrix(B @ B.T + n * np.eye(n))
    b = 3 * rng.standard_normal(n)
    psi = np.concatenate([rng.standard_normal(n_con), np.full(n_free, np.inf)])
    cub = rng.random(n)

    def semi(u):
        return cub * u**3, sp.diags(3 * cub * u**2)

    return AlgebraicVI(K, b, psi, semi)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pdas_matches_enumeration(seed):
    system = _random_system(np.random.default_rng(seed))
    a = pdas(system, tol=1e-10)
    b = brute_force_vi(system)
    assert np.max(np.abs(a.state - b.state)) <= 1e-8


def test_enumeration_limit():
    system = _random_system(np.random.default_rng(0), n_con=16)
    with pytest.raises(SolverError):
        brute_force_vi(system)


def test_kkt_residuals_flag_infeasible():
    system = AlgebraicVI(sp.identity(2, format="csr"), np.zeros(2), np.array([0.0, np.inf]))
    r = kkt_residuals(system, np.array([1.0, 0.0]), np.zeros(2))
    assert r["feasibility"] == 1.0


def test_energy_decreases_to_minimum():
    prob = ObstacleProblem(unit_square_mesh(6), 1.0, SemilinearDensity.from_expression("u^3"), 0.2, load=5.0)
    sol = solve_obstacle_semilinear(prob, tol=1e-10)
    W = lambda x, u: 0.25 * u**4  # noqa: E731
    e0 = energy(prob, sol.state, W)
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = np.minimum(sol.state + 0.05 * rng.standard_normal(len(sol.state)), 0.2)
        assert energy(prob, v, W) >= e0 - 1e-12


def test_transported_at_zero_equals_static(bump):
    prob = demo_problem(8)
    a = solve_obstacle_semilinear(prob)
    b = solve_transported(prob, bump, 0.0)
    assert np.array_equal(a.state, b.state)


def test_p_laplace_two_is_linear():
    m = unit_square_mesh(8)
    u2 = solve_p_laplace(m, 2.0).u
    u4 = solve_p_laplace(m, 2.0, f=2.0).u
    assert np.allclose(u4, 2 * u2)
    assert np.all(u2[m.boundary_nodes] == 0.0)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_p_laplace_minimises_energy(p):
    m = unit_square_mesh(8)
    res = solve_p_laplace(m, p)
    b = m.lumped_mass.copy()
    e0 = p_laplace_energy(m, p, res.u, b)
    assert all(x >= y - 1e-12 for x, y in zip(res.energies, res.energies[1:]))
    rng = np.random.default_rng(2)
    interior = np.ones(m.n_vertices, dtype=bool)
    interior[m.boundary_nodes] = False
    for _ in range(10):
        d = 1e-3 * rng.standard_normal(m.n_vertices) * interior
        assert p_laplace_energy(m, p, res.u + d, b) >= e0 - 1e-12


def test_p_laplace_rejects_bad_p():
    with pytest.raises(ValueError):
        solve_p_laplace(unit_square_mesh(2), 1.0)
