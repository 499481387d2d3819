import json

import numpy as np
import pytest

from vishape import damage as dmg
from vishape.config import list_demos, load_config
from vishape.flow import VectorField
from vishape.mesh import unit_square_mesh


@pytest.fixture(scope="module")
def setup():
    cfg = load_config(list_demos()["damage-dj"])
    spec = cfg.damage()
    traj = dmg.run(spec)
    return spec, cfg.cost(), cfg.field(), traj


def test_trajectory_diagnostics(setup):
    spec, _, _, traj = setup
    assert traj.N == spec.N
    assert traj.max_principle()
    assert traj.dissipation_ok()
    # chi is nonincreasing in time and stays in [0, 1]
    for a, b in zip(traj.chi, traj.chi[1:]):
        assert np.all(b <= a + 1e-12)
    assert min(traj.min_chi()) >= 0.0
    assert traj.chi_solutions[0] is None


def test_dirichlet_data_imposed(setup):
    spec, _, _, traj = setup
    b = spec.mesh.boundary_nodes
    v = spec.mesh.vertices[b]
    for k in range(traj.N + 1):
        u = traj.u[k].reshape(-1, 2)
        assert np.allclose(u[b, 0], 0.5 * k * spec.tau * v[:, 0], atol=1e-12)
        assert np.allclose(u[b, 1], 0.0, atol=1e-12)


def test_zero_steps():
    spec = dmg.DamageModelSpec(unit_square_mesh(3), 0.1, 0)
    traj = dmg.run(spec)
    assert len(traj.u) == 1 and len(traj.chi) == 1


def test_invalid_specs():
    m = unit_square_mesh(2)
    with pytest.raises(dmg.DamageError):
        dmg.DamageModelSpec(m, 0.0, 2)
    with pytest.raises(dmg.DamageError):
        dmg.DamageModelSpec(m, 0.1, 2, chi0=dmg.SpaceTimeScalar("1.5"))
    with pytest.raises(dmg.DamageError):
        dmg.CostSpec(lam_u=-1.0)


def test_unloaded_body_stays_at_rest():
    spec = dmg.DamageModelSpec(unit_square_mesh(4), 0.1, 3, g1=dmg.ramp_profile(0.0))
    traj = dmg.run(spec)
    for u in traj.u:
        assert np.allclose(u, 0.0)
    for c in traj.chi:
        assert np.allclose(c, 1.0)


def test_state_sensitivities_match_fd(setup):
    spec, _, X, traj = setup
    sens = dmg.sensitivity_chain(spec, traj, X)
    t = 1e-6
    moved = dmg.run(spec, X, t)
    for k in range(1, traj.N + 1):
        fd_u = (moved.u[k] - traj.u[k]) / t
        fd_c = (moved.chi[k] - traj.chi[k]) / t
        assert np.max(np.abs(fd_u - sens.udot[k])) <= 1e-4 * (1 + np.max(np.abs(sens.udot[k])))
        assert np.max(np.abs(fd_c - sens.chidot[k])) <= 1e-4 * (1 + np.max(np.abs(sens.chidot[k])))


def test_dj_against_fd_and_homogeneity(setup):
    spec, cs, X, traj = setup
    J = dmg.cost(traj, cs, spec)
    dJ = dmg.shape_derivative(spec, cs, X, traj)
    errs = [abs(dmg.finite_difference_dJ(spec, cs, X, t, J) - dJ) for t in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] <= 1e-3 * max(1.0, abs(dJ))
    for lam in (0.5, 2.0, 10.0):
        assert dmg.shape_derivative(spec, cs, X.scaled(lam), traj) == pytest.approx(lam * dJ, rel=1e-6)


def test_zero_field_zero_derivative(setup):
    spec, cs, _, traj = setup
    assert dmg.shape_derivative(spec, cs, VectorField.zero(), traj) == 0.0


def test_catalog_is_symmetric(setup):
    spec, cs, _, traj = setup
    cat = dmg.default_catalog()
    assert len(cat) == 12
    mn, worst, vals = dmg.optimality_residual(spec, cs, cat, traj)
    assert vals[worst] == mn
    assert vals["+tx"] == pytest.approx(-vals["-tx"], rel=1e-10, abs=1e-14)


def test_exports(setup):
    spec, cs, _, traj = setup
    csv = dmg.trajectory_csv(spec, traj).splitlines()
    assert csv[0] == "step,node,x,y,ux,uy,chi,mu"
    assert len(csv) == 1 + (traj.N + 1) * spec.mesh.n_vertices
    s = json.loads(dmg.summary_json(1.0, [0.5], traj))
    assert s["max_principle_ok"] and s["dissipation_ok"]
