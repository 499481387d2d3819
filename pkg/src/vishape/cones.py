"""Discrete tangent/normal cone structure at a VI solution, material derivatives and
state-shape derivatives."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import Geometry, GeometryRate, quadrature, stiffness
from .flow import VectorField, fit_slope
from .mesh import Mesh
from .vi import AlgebraicVI, ObstacleProblem, ScalarData, SolverError, VISolution, pdas, solve_transported


class ConeError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteCone:
    """{d : d_i = g_i on equality nodes, d_i <= g_i on inequality nodes}."""

    equality: np.ndarray
    inequality: np.ndarray
    bound: np.ndarray

    def __post_init__(self):
        if np.any(self.equality & self.inequality):
            raise ConeError("equality and inequality node sets overlap")
        if not np.all(np.isfinite(self.bound[self.equality | self.inequality])):
            raise ConeError("cone bounds must be finite on constrained nodes")

    @property
    def free(self) -> np.ndarray:
        return ~(self.equality | self.inequality)

    @classmethod
    def whole_space(cls, n):
        z = np.zeros(n, dtype=bool)
        return cls(z, z.copy(), np.zeros(n))

    def contains(self, d, tol=1e-10) -> bool:
        return not self.violations(d, tol)

    def violations(self, d, tol=1e-10) -> dict:
        d = np.asarray(d)
        out = {}
        eq = np.abs(d - self.bound)[self.equality]
        if eq.size and eq.max() > tol:
            out["equality"] = float(eq.max())
        ineq = (d - self.bound)[self.inequality]
        if ineq.size and ineq.max() > tol:
            out["inequality"] = float(ineq.max())
        return out

    def shifted(self, zeta) -> DiscreteCone:
        return DiscreteCone(self.equality, self.inequality, self.bound + np.asarray(zeta))


def tangent_kern_cone(solution: VISolution, psidot, tol=None, strict=False, check_tol=1e-6) -> DiscreteCone:
    """Cone T_u(K) cap kern(mu) shifted by psidot.

    Strongly active nodes (mu > tol) become equalities, biactive nodes inequalities.
    ``strict=True`` treats biactive nodes as equalities (strict-complementarity linearisation).
    """
    res = solution.residuals
    worst = max(res["feasibility"], res["sign"], res["complementarity"], res["stationarity"])
    if worst > check_tol:
        raise ConeError(f"solution violates its KKT conditions ({worst:.3e})")
    tol = solution.tol_act if tol is None else tol
    gap = solution.psi - solution.state
    contact = np.isfinite(solution.psi) & (gap <= tol)
    strong = contact & (solution.multiplier > tol)
    bi = contact & ~strong
    psidot = np.asarray(psidot, dtype=float)
    if strict:
        return DiscreteCone(strong | bi, np.zeros_like(bi), psidot.copy())
    return DiscreteCone(strong, bi, psidot.copy())


# ---------------------------------------------------------------------------
# material derivative


@dataclass
class MaterialDerivativeData:
    rate: GeometryRate
    psidot: np.ndarray
    X: VectorField


def material_data(problem: ObstacleProblem, X: VectorField) -> MaterialDerivativeData:
    return MaterialDerivativeData(GeometryRate.of(problem.mesh, X), problem.obstacle_rate(X), X)


def operator_rate(problem: ObstacleProblem, u, data: MaterialDerivativeData) -> np.ndarray:
    """d/dt at t = 0 of the transported residual F_t(u) at fixed nodal u."""
    mesh = problem.mesh
    rate = data.rate
    r = stiffness(mesh, rate.Aprime) @ u + problem.lam * rate.lumped * u
    q = quadrature(mesh)
    yq = u[q.node]
    dens = problem.density
    Xq = rate.X_node[q.node]
    val = rate.div_node[q.node] * dens.w(q, yq)
    if dens.wdot is not None:
        val = val + dens.wdot(q, yq, Xq)
    r = r + np.bincount(q.node, weights=q.weight * val, minlength=mesh.n_vertices)
    load = problem.load
    if isinstance(load, ScalarData):
        f = load.value(mesh.vertices)
        r = r - mesh.lumped_mass * (rate.div_node * f + load.derivative_along(data.X, mesh.vertices))
    elif load is not None:
        r = r - rate.lumped * np.asarray(load, dtype=float)
    return r


def cone_vi(H, rhs, cone: DiscreteCone, tol=1e-10, u0=None) -> VISolution:
    """Solve H d = rhs over the cone: d_E fixed, d_I <= bound with multipliers."""
    H = sp.csr_matrix(H)
    n = H.shape[0]
    E = cone.equality
    keep = np.flatnonzero(~E)
    d = np.zeros(n)
    d[E] = cone.bound[E]
    b = rhs - H @ d
    Hr = H[keep][:, keep]
    psi = np.where(cone.inequality, cone.bound, np.inf)[keep]
    start = None if u0 is None else np.asarray(u0, dtype=float)[keep]
    sub = pdas(AlgebraicVI(Hr, b[keep], psi), tol=tol, u0=start)
    d[keep] = sub.state
    mu = np.zeros(n)
    mu[keep] = sub.multiplier
    mu[E] = (rhs - H @ d)[E]
    act = E.copy()
    act[keep] = sub.active
    sol = VISolution(d, mu, act, np.where(E | cone.inequality, cone.bound, np.inf), sub.tol_act, sub.residuals, sub.iterations)
    return sol


@dataclass
class MaterialDerivative:
    udot: np.ndarray
    ydot: np.ndarray
    cone: DiscreteCone
    solution: VISolution


def solve_material_derivative(problem: ObstacleProblem, solution: VISolution, X: VectorField, tol=1e-10,
                              data: Optional[MaterialDerivativeData] = None, u0=None, strict=False,
                              tol_act=None) -> MaterialDerivative:
    """Material derivative u-dot of the transported VI at t = 0 (and y-dot = u-dot - psi-dot).

    ``tol_act`` overrides the nodal activity tolerance used to classify contact nodes.
    """
    data = data or material_data(problem, X)
    u = solution.state
    cone = tangent_kern_cone(solution, data.psidot, tol=tol_act, strict=strict)
    H = problem.system().jacobian(u)
    rhs = -operator_rate(problem, u, data)
    try:
        sol = cone_vi(H, rhs, cone, tol=tol, u0=u0)
    except SolverError as exc:
        raise SolverError(f"material derivative VI failed: {exc}") from exc
    return MaterialDerivative(sol.state, sol.state - data.psidot, cone, sol)


@dataclass
class RateRow:
    t: float
    error_h1: float
    quotient_norm: float


@dataclass
class FDTable:
    rows: list
    monotone: bool
    slope: Optional[float]
    last_quotient: np.ndarray
    derivative: MaterialDerivative

    def to_csv(self) -> str:
        return rate_table_csv(self.rows)


def rate_table_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("t,error_h1,quotient_norm\n")
    for r in rows:
        buf.write(f"{r.t:.17g},{r.error_h1:.17g},{r.quotient_norm:.17g}\n")
    return buf.getvalue()


def fd_material_oracle(problem: ObstacleProblem, X: VectorField, t_sequence, tol=1e-10,
                       solution: Optional[VISolution] = None, tol_act=None) -> FDTable:
    """Compare (y^t - y)/t from transported solves against y-dot."""
    ts = [float(t) for t in t_sequence]
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("t_sequence must be strictly decreasing")
    base = solution or solve_transported(problem, X, 0.0, tol=tol)
    md = solve_material_derivative(problem, base, X, tol=tol, tol_act=tol_act)
    mesh = problem.mesh
    rows = []
    q = np.zeros(mesh.n_vertices)
    for t in ts:
        st = solve_transported(problem, X, t, tol=tol)
        q = (st.shifted - base.shifted) / t
        rows.append(RateRow(t, mesh.h1_norm(q - md.ydot), mesh.h1_norm(q)))
    errs = [r.error_h1 for r in rows]
    mono = all(b < a or a == 0.0 for a, b in zip(errs, errs[1:]))
    return FDTable(rows, mono, fit_slope(ts, errs) if len(ts) > 1 else None, q, md)


def y_cone(cone: DiscreteCone) -> DiscreteCone:
    """The same cone expressed for y = u - psi (zero shift)."""
    return DiscreteCone(cone.equality, cone.inequality, np.zeros_like(cone.bound))


# ---------------------------------------------------------------------------
# shape derivatives


def state_shape_derivative(udot, u, X: VectorField, mesh: Mesh) -> np.ndarray:
    """u' = u-dot - grad(u) . X with area-weighted recovered nodal gradients."""
    g = mesh.recovered_gradient(np.asarray(u, dtype=float))
    return np.asarray(udot, dtype=float) - np.einsum("nd,nd->n", g, X.value(mesh.vertices))


def boundary_form_value(u, density, X: VectorField, phi, mesh: Mesh, lam: float, mode="static") -> float:
    """-int_Gamma [grad_G u . grad_G phi + (lam u + w(x, u)) phi] (X . n) ds by edge midpoints."""
    if mode != "static":
        raise ConeError("the boundary form is only defined for a static obstacle")
    u = np.asarray(u, dtype=float)
    phi = np.asarray(phi, dtype=float)
    e = mesh.boundary_edges
    a, b = e[:, 0], e[:, 1]
    va, vb = mesh.vertices[a], mesh.vertices[b]
    L = np.linalg.norm(vb - va, axis=1)
    mid = 0.5 * (va + vb)
    n = mesh.outward_normals()
    Xn = np.einsum("ed,ed->e", X.value(mid), n)
    um = 0.5 * (u[a] + u[b])
    pm = 0.5 * (phi[a] + phi[b])
    if density is None:
        wm = np.zeros(len(e))
    else:
        from .fem import QuadPoints

        qp = QuadPoints(np.zeros(len(e), dtype=np.int64), np.zeros((len(e), 3)), mid, L, None)
        wm = np.asarray(density.w(qp, um), dtype=float)
    tang = (u[b] - u[a]) / L * (phi[b] - phi[a]) / L
    return float(-np.sum(L * (tang + (lam * um + wm) * pm) * Xn))
