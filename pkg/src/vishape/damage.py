"""Time-discrete damage model with dynamic obstacles and its shape sensitivities.

Each step first solves the damage VI for chi^k (obstacle chi^{k-1}, elastic driving force
from u^{k-1}) and then the inertial elasticity problem for u^k with stiffness c(chi^k) C.
Displacements are interleaved vectors [u0x, u0y, u1x, ...]; Dirichlet data hold on every
boundary node.

The element stiffness factor is the vertex average of c(chi), so the elastic term in the
damage VI is exactly the chi-gradient of the elastic energy; this makes the discrete
energy-dissipation inequality hold without quadrature defects.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cones import cone_vi, tangent_kern_cone
from .expr import Expression
from .fem import (
    ZERO_PROFILE,
    ElasticityTensor,
    Geometry,
    GeometryRate,
    Profile,
    apply_dirichlet,
    assemble_elasticity,
    assemble_elasticity_rate,
    ramp_profile,
    stiffness,
    strain_operator,
    voigt_strain,
)
from .flow import FlowError, VectorField, integrate_flow, normal_boundary_bump, translation_bump
from .mesh import Mesh, MeshError, deform
from .vi import AlgebraicVI, SolverError, VISolution, pdas


class DamageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# space-time data on the hold-all domain


class SpaceTimeScalar:
    """f(x, y, s) given as an expression; s is the physical time k * tau."""

    def __init__(self, text: str):
        self.text = str(text)
        self.expr = Expression(self.text, ("x", "y", "s"))
        self.dx = self.expr.diff("x")
        self.dy = self.expr.diff("y")

    def value(self, points, s=0.0):
        p = np.atleast_2d(points)
        return self.expr(x=p[:, 0], y=p[:, 1], s=np.full(len(p), float(s)))

    def grad(self, points, s=0.0):
        p = np.atleast_2d(points)
        ss = np.full(len(p), float(s))
        return np.stack([self.dx(x=p[:, 0], y=p[:, 1], s=ss), self.dy(x=p[:, 0], y=p[:, 1], s=ss)], axis=1)

    def along(self, points, s, Xv):
        return np.einsum("nd,nd->n", self.grad(points, s), Xv)

    def __repr__(self):
        return f"SpaceTimeScalar({self.text!r})"


class SpaceTimeVector:
    def __init__(self, x_text="0", y_text="0"):
        self.cx = SpaceTimeScalar(x_text)
        self.cy = SpaceTimeScalar(y_text)

    def value(self, points, s=0.0):
        """Interleaved nodal vector."""
        return np.stack([self.cx.value(points, s), self.cy.value(points, s)], axis=1).ravel()

    def along(self, points, s, Xv):
        return np.stack([self.cx.along(points, s, Xv), self.cy.along(points, s, Xv)], axis=1).ravel()


# ---------------------------------------------------------------------------
# model specification


@dataclass
class DamageModelSpec:
    mesh: Mesh
    tau: float
    N: int
    tensor: ElasticityTensor = field(default_factory=ElasticityTensor)
    g1: Profile = field(default_factory=lambda: ramp_profile(0.5))
    g2: Profile = ZERO_PROFILE
    load: SpaceTimeVector = field(default_factory=SpaceTimeVector)
    dirichlet: SpaceTimeVector = field(default_factory=SpaceTimeVector)
    u0: SpaceTimeVector = field(default_factory=SpaceTimeVector)
    v0: SpaceTimeVector = field(default_factory=SpaceTimeVector)
    chi0: SpaceTimeScalar = field(default_factory=lambda: SpaceTimeScalar("1"))
    tol: float = 1e-10

    def __post_init__(self):
        if not self.tau > 0:
            raise DamageError("time step tau must be positive")
        if self.N < 0:
            raise DamageError("step count N must be nonnegative")
        c0 = self.chi0.value(self.mesh.vertices)
        if np.any(c0 < -1e-12) or np.any(c0 > 1 + 1e-12):
            raise DamageError("initial damage chi0 must lie in [0, 1]")

    def with_mesh(self, mesh: Mesh) -> DamageModelSpec:
        return dataclasses.replace(self, mesh=mesh)

    @property
    def dirichlet_dofs(self) -> np.ndarray:
        b = self.mesh.boundary_nodes
        return np.sort(np.concatenate([2 * b, 2 * b + 1]))


@dataclass
class CostSpec:
    lam_u: float = 1.0
    lam_chi: float = 1.0
    u_ref: SpaceTimeVector = field(default_factory=SpaceTimeVector)
    chi_ref: SpaceTimeScalar = field(default_factory=lambda: SpaceTimeScalar("1"))

    def __post_init__(self):
        if self.lam_u < 0 or self.lam_chi < 0:
            raise DamageError("cost weights must be nonnegative")


@dataclass
class DamageTrajectory:
    u: list  # u^0 .. u^N
    u_minus: np.ndarray  # u^{-1}
    chi: list  # chi^0 .. chi^N
    chi_solutions: list  # index k -> VISolution of step k (None at k = 0)
    reactions: list
    energies: list
    slacks: list
    geometry: Geometry

    @property
    def multipliers(self):
        return [None if s is None else s.multiplier for s in self.chi_solutions]

    @property
    def N(self):
        return len(self.chi) - 1

    def max_principle(self, tol=1e-10) -> bool:
        for k in range(1, len(self.chi)):
            c, cp = self.chi[k], self.chi[k - 1]
            if np.any(c < -tol) or np.any(c > cp + tol) or np.any(cp > 1 + tol):
                return False
        return bool(np.all(self.chi[0] >= -tol) and np.all(self.chi[0] <= 1 + tol))

    def dissipation_ok(self, tol=1e-8) -> bool:
        return all(s >= -tol for s in self.slacks)

    def min_chi(self) -> list:
        return [float(np.min(c)) for c in self.chi]


@dataclass
class SensitivityTrajectory:
    udot: list  # k = 0 .. N
    chidot: list
    strain_rates: list  # Voigt strain rates of u^{k-1} used at step k


# ---------------------------------------------------------------------------
# per-geometry discrete operators


class _Discrete:
    def __init__(self, spec: DamageModelSpec, geom: Geometry):
        mesh = spec.mesh
        self.spec, self.geom, self.mesh = spec, geom, mesh
        self.KA = stiffness(mesh, geom.A)
        self.m = geom.lumped
        self.mv = np.repeat(self.m, 2)
        self.nodes = geom.mapped_nodes
        self.elem_w = mesh.areas * geom.xi_elem
        self.dofs = spec.dirichlet_dofs

    def strain_energy_density(self, u) -> np.ndarray:
        ev = voigt_strain(self.mesh, u, self.geom.inv_jac)
        return np.einsum("ta,ab,tb->t", ev, self.spec.tensor.D, ev)

    def nodal_elastic_weight(self, eT, elem_w=None) -> np.ndarray:
        """E_i = sum over elements at i of |T| xi_T e_T / 6 (half of a one-third share)."""
        w = (self.elem_w if elem_w is None else elem_w) * eT / 6.0
        return np.bincount(self.mesh.triangles.ravel(), weights=np.repeat(w, 3), minlength=self.mesh.n_vertices)

    def chi_system(self, chi_prev, eT) -> AlgebraicVI:
        s = self.spec
        tau, m, T = s.tau, self.m, s.tensor
        E = self.nodal_elastic_weight(eT)
        K = (self.KA + sp.diags(m / tau)).tocsr()
        b = m * chi_prev / tau - m * s.g2.d1(chi_prev) - E * T.c2.d1(chi_prev)

        def semilinear(chi):
            vec = m * s.g1.d1(chi) + E * T.c1.d1(chi)
            return vec, sp.diags(m * s.g1.d2(chi) + E * T.c1.d2(chi))

        return AlgebraicVI(K, b, chi_prev.copy(), semilinear)

    def u_operator(self, chi):
        s = self.spec
        return (sp.diags(self.mv / s.tau**2) + assemble_elasticity(self.geom, s.tensor, chi)).tocsr()

    def u_step(self, chi, u1, u2, k):
        s = self.spec
        A = self.u_operator(chi)
        sk = k * s.tau
        L = self.mv * s.load.value(self.nodes, sk)
        rhs = self.mv * (2 * u1 - u2) / s.tau**2 + L
        g = s.dirichlet.value(self.nodes, sk)
        Kd, bd = apply_dirichlet(A, rhs, self.dofs, g[self.dofs])
        u = spla.spsolve(Kd.tocsc(), bd)
        if not np.all(np.isfinite(u)):
            raise DamageError(f"singular elasticity system at step {k}")
        reaction = A @ u - rhs
        return u, reaction, L

    def energy(self, u, u_prev, chi) -> float:
        s = self.spec
        v = (u - u_prev) / s.tau
        Kel = assemble_elasticity(self.geom, s.tensor, chi)
        g = s.g1(chi) + s.g2(chi)
        return float(0.5 * v @ (self.mv * v) + 0.5 * u @ (Kel @ u) + 0.5 * chi @ (self.KA @ chi) + self.m @ g)


# ---------------------------------------------------------------------------
# stepping


def initial_state(spec: DamageModelSpec, geom: Geometry):
    nodes = geom.mapped_nodes
    u0 = spec.u0.value(nodes, 0.0)
    um = u0 + spec.tau * spec.v0.value(nodes, 0.0)
    chi0 = np.clip(spec.chi0.value(nodes, 0.0), 0.0, 1.0)
    return u0, um, chi0


def damage_step(spec: DamageModelSpec, state, k: int, geom: Optional[Geometry] = None, _dis=None):
    """One step of the scheme from ``state = (u^{k-1}, u^{k-2}, chi^{k-1})``.

    Returns (chi^k, u^k, VISolution of the damage VI, reaction, load vector).
    """
    dis = _dis or _Discrete(spec, geom or Geometry.reference(spec.mesh))
    u1, u2, chi_prev = state
    eT = dis.strain_energy_density(u1)
    try:
        sol = pdas(dis.chi_system(chi_prev, eT), tol=1e-9)
    except SolverError as exc:
        raise SolverError(f"damage VI at step {k}: {exc}") from exc
    chi = sol.state
    u, reaction, L = dis.u_step(chi, u1, u2, k)
    return chi, u, sol, reaction, L


def run(spec: DamageModelSpec, X: Optional[VectorField] = None, t: float = 0.0) -> DamageTrajectory:
    """Run the scheme for k = 1..N (on the domain transported by the flow of X at time t)."""
    geom = Geometry.transported(spec.mesh, X, t) if (X is not None and t != 0.0) else Geometry.reference(spec.mesh)
    dis = _Discrete(spec, geom)
    u0, um, chi0 = initial_state(spec, geom)
    us, chis, sols, reacts = [u0], [chi0], [None], [None]
    energies = [dis.energy(u0, um, chi0)]
    slacks = []
    u_minus = um
    for k in range(1, spec.N + 1):
        u_prev2 = us[k - 2] if k >= 2 else u_minus
        chi, u, sol, reaction, L = damage_step(spec, (us[k - 1], u_prev2, chis[k - 1]), k, _dis=dis)
        us.append(u)
        chis.append(chi)
        sols.append(sol)
        reacts.append(reaction)
        energies.append(dis.energy(u, us[k - 1], chi))
        du = u - us[k - 1]
        dchi = chi - chis[k - 1]
        work = float((L + reaction) @ du)
        slacks.append(work - (energies[k] - energies[k - 1] + float(dis.m @ dchi**2) / spec.tau))
    return DamageTrajectory(us, u_minus, chis, sols, reacts, energies, slacks, geom)


# ---------------------------------------------------------------------------
# sensitivities


def sensitivity_chain(spec: DamageModelSpec, traj: DamageTrajectory, X: VectorField) -> SensitivityTrajectory:
    """Material derivatives (u-dot^k, chi-dot^k) of the trajectory along the flow of X."""
    mesh = spec.mesh
    geom = Geometry.reference(mesh)
    dis = _Discrete(spec, geom)
    rate = GeometryRate.of(mesh, X)
    T = spec.tensor
    tau, m = spec.tau, dis.m
    nodes = mesh.vertices
    Xv = rate.X_node
    div = rate.div_node
    m_div = m * div
    KAp = stiffness(mesh, rate.Aprime)
    I = np.tile(np.eye(2), (mesh.n_triangles, 1, 1))
    B0 = strain_operator(mesh, I)
    Bd = strain_operator(mesh, -rate.jac_elem)
    tri = mesh.triangles

    def ue(u):
        return np.stack([u[2 * tri], u[2 * tri + 1]], axis=2).reshape(-1, 6)

    udot_m = spec.u0.along(nodes, 0.0, Xv) + tau * spec.v0.along(nodes, 0.0, Xv)
    udots = [spec.u0.along(nodes, 0.0, Xv)]
    chidots = [spec.chi0.along(nodes, 0.0, Xv)]
    rates = [None]
    area_div = mesh.areas * rate.div_elem
    for k in range(1, traj.N + 1):
        chi, chi_prev = traj.chi[k], traj.chi[k - 1]
        u1 = traj.u[k - 1]
        u2 = traj.u[k - 2] if k >= 2 else traj.u_minus
        udot1 = udots[k - 1]
        udot2 = udots[k - 2] if k >= 2 else udot_m
        ev = np.einsum("tai,ti->ta", B0, ue(u1))
        evdot = np.einsum("tai,ti->ta", B0, ue(udot1)) + np.einsum("tai,ti->ta", Bd, ue(u1))
        eT = np.einsum("ta,ab,tb->t", ev, T.D, ev)
        eTdot = 2.0 * np.einsum("ta,ab,tb->t", ev, T.D, evdot)
        E = dis.nodal_elastic_weight(eT)
        Ediv = dis.nodal_elastic_weight(eT, area_div)
        Edot = dis.nodal_elastic_weight(eTdot)
        cp = T.c1.d1(chi) + T.c2.d1(chi_prev)
        cdp = chidots[k - 1]
        H = (dis.KA + sp.diags(m / tau + m * spec.g1.d2(chi) + E * T.c1.d2(chi))).tocsr()
        Rdot = (
            KAp @ chi
            + m_div * (chi - chi_prev) / tau
            - m * cdp / tau
            + m_div * (spec.g1.d1(chi) + spec.g2.d1(chi_prev))
            + m * spec.g2.d2(chi_prev) * cdp
            + Ediv * cp
            + E * T.c2.d2(chi_prev) * cdp
            + Edot * cp
        )
        cone = tangent_kern_cone(traj.chi_solutions[k], cdp)
        try:
            chidot = cone_vi(H, -Rdot, cone).state
        except SolverError as exc:
            raise SolverError(f"sensitivity cone VI at step {k}: {exc}") from exc
        # displacement rate
        u = traj.u[k]
        sk = k * tau
        A = dis.u_operator(chi)
        Kdot = assemble_elasticity_rate(rate, T, chi, chidot)
        mv = dis.mv
        mv_div = np.repeat(m_div, 2)
        L = spec.load.value(nodes, sk)
        Ldot = mv_div * L + mv * spec.load.along(nodes, sk, Xv)
        rhs = -(mv_div * (u - 2 * u1 + u2) / tau**2 - mv * (2 * udot1 - udot2) / tau**2 + Kdot @ u - Ldot)
        g = spec.dirichlet.along(nodes, sk, Xv)
        Kd, bd = apply_dirichlet(A, rhs, dis.dofs, g[dis.dofs])
        udot = spla.spsolve(Kd.tocsc(), bd)
        udots.append(udot)
        chidots.append(chidot)
        rates.append(evdot)
    return SensitivityTrajectory(udots, chidots, rates)


# ---------------------------------------------------------------------------
# cost and derivative


def cost(traj: DamageTrajectory, costspec: CostSpec, spec: DamageModelSpec) -> float:
    """Tracking functional with lumped quadrature on the trajectory's geometry."""
    geom = traj.geometry
    m = geom.lumped
    mv = np.repeat(m, 2)
    nodes = geom.mapped_nodes
    J = 0.0
    for k in range(1, traj.N + 1):
        s = k * spec.tau
        du = traj.u[k] - costspec.u_ref.value(nodes, s)
        dc = traj.chi[k] - costspec.chi_ref.value(nodes, s)
        J += 0.5 * costspec.lam_u * float(mv @ du**2) + 0.5 * costspec.lam_chi * float(m @ dc**2)
    return J


def eulerian_semiderivative(spec: DamageModelSpec, traj: DamageTrajectory, sens: SensitivityTrajectory,
                            costspec: CostSpec, X: VectorField) -> float:
    mesh = spec.mesh
    rate = GeometryRate.of(mesh, X)
    m = mesh.lumped_mass
    mv = np.repeat(m, 2)
    div = rate.div_node
    nodes = mesh.vertices
    Xv = rate.X_node
    dJ = 0.0
    for k in range(1, traj.N + 1):
        s = k * spec.tau
        du = traj.u[k] - costspec.u_ref.value(nodes, s)
        dc = traj.chi[k] - costspec.chi_ref.value(nodes, s)
        ur_dot = costspec.u_ref.along(nodes, s, Xv)
        cr_dot = costspec.chi_ref.along(nodes, s, Xv)
        dJ += costspec.lam_u * (0.5 * float(mv @ (np.repeat(div, 2) * du**2)) + float(mv @ (du * (sens.udot[k] - ur_dot))))
        dJ += costspec.lam_chi * (0.5 * float(m @ (div * dc**2)) + float(m @ (dc * (sens.chidot[k] - cr_dot))))
    return dJ


def shape_derivative(spec: DamageModelSpec, costspec: CostSpec, X: VectorField, traj=None) -> float:
    traj = traj or run(spec)
    return eulerian_semiderivative(spec, traj, sensitivity_chain(spec, traj, X), costspec, X)


def finite_difference_dJ(spec: DamageModelSpec, costspec: CostSpec, X: VectorField, t: float, J0=None) -> float:
    J0 = cost(run(spec), costspec, spec) if J0 is None else J0
    return (cost(run(spec, X, t), costspec, spec) - J0) / t


# ---------------------------------------------------------------------------
# optimality and descent


def default_catalog(amplitude=0.2, radius=0.3) -> dict:
    """Signed bump directions for the unit square: interior translations and boundary-normal pushes."""
    base = {
        "tx": translation_bump((1.0, 0.0), (0.5, 0.5), radius, amplitude),
        "ty": translation_bump((0.0, 1.0), (0.5, 0.5), radius, amplitude),
        "right": normal_boundary_bump((1.0, 0.5), (1.0, 0.0), radius, amplitude),
        "left": normal_boundary_bump((0.0, 0.5), (-1.0, 0.0), radius, amplitude),
        "top": normal_boundary_bump((0.5, 1.0), (0.0, 1.0), radius, amplitude),
        "bottom": normal_boundary_bump((0.5, 0.0), (0.0, -1.0), radius, amplitude),
    }
    out = {}
    for name, X in base.items():
        out["+" + name] = X
        out["-" + name] = -X
    return out


def optimality_residual(spec: DamageModelSpec, costspec: CostSpec, catalog: dict, traj=None):
    """(min dJ over the catalog, name of the worst direction, all values in catalog order)."""
    traj = traj or run(spec)
    values = {name: shape_derivative(spec, costspec, X, traj) for name, X in catalog.items()}
    worst = min(values, key=lambda k: (values[k], k))
    return values[worst], worst, values


@dataclass
class DescentResult:
    meshes: list
    J: list
    directions: list
    steps: list
    converged: bool


def shape_descent(spec: DamageModelSpec, costspec: CostSpec, catalog: dict, iterations=20, step=0.1,
                  tol_opt=1e-4, min_step=1e-3) -> DescentResult:
    """Catalog descent: move along the most negative dJ direction with backtracking on J."""
    cur = spec
    traj = run(cur)
    J = cost(traj, costspec, cur)
    res = DescentResult([cur.mesh], [J], [], [], False)
    for _ in range(iterations):
        mn, name, _ = optimality_residual(cur, costspec, catalog, traj)
        if mn >= -tol_opt:
            res.converged = True
            return res
        X = catalog[name]
        s = step
        accepted = False
        while s >= min_step:
            try:
                moved = deform(cur.mesh, lambda p: integrate_flow(X, s, p, cur.mesh.box)[0])
                trial = cur.with_mesh(moved)
                ttraj = run(trial)
                Jt = cost(ttraj, costspec, trial)
            except (FlowError, MeshError, SolverError, DamageError):
                s *= 0.5
                continue
            if Jt < J:
                cur, traj, J = trial, ttraj, Jt
                res.meshes.append(moved)
                res.J.append(J)
                res.directions.append(name)
                res.steps.append(s)
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
    mn, _, _ = optimality_residual(cur, costspec, catalog, traj)
    res.converged = mn >= -tol_opt
    return res


# ---------------------------------------------------------------------------
# export


def trajectory_csv(spec: DamageModelSpec, traj: DamageTrajectory) -> str:
    buf = io.StringIO()
    buf.write("step,node,x,y,ux,uy,chi,mu\n")
    v = spec.mesh.vertices
    for k in range(traj.N + 1):
        u = traj.u[k].reshape(-1, 2)
        mu = traj.chi_solutions[k].multiplier if k else np.zeros(len(v))
        for i in range(len(v)):
            buf.write(f"{k},{i},{v[i, 0]:.17g},{v[i, 1]:.17g},{u[i, 0]:.17g},{u[i, 1]:.17g},"
                      f"{traj.chi[k][i]:.17g},{mu[i]:.17g}\n")
    return buf.getvalue()


def summary_json(J, dJ_catalog, traj: DamageTrajectory) -> str:
    return json.dumps({
        "J": float(J),
        "dJ_catalog": [float(x) for x in dJ_catalog],
        "max_principle_ok": traj.max_principle(),
        "dissipation_ok": traj.dissipation_ok(),
    }, sort_keys=True)
