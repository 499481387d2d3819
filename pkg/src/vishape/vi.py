"""Discrete obstacle problems: primal-dual active set solver, transported solves,
p-Laplace minimisation and an active-set enumeration oracle.

Sign convention: the discrete VI  u <= psi,  <F(u), v - u> >= 0 for feasible v  is solved
as F(u) + mu = 0, mu >= 0, mu (psi - u) = 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import Expression
from .fem import Geometry, SemilinearDensity, SemilinearEvaluator, assemble_bilinear, assemble_load
from .flow import VectorField
from .mesh import Mesh


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (last residual {residual:.3e})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# data on the hold-all domain


@dataclass(frozen=True)
class ScalarData:
    """A scalar function on D with its gradient, evaluated on (m, 2) point arrays."""

    value: Callable
    grad: Callable
    name: str = ""

    @classmethod
    def from_expression(cls, text: str) -> ScalarData:
        e = Expression(text)
        ex, ey = e.diff("x"), e.diff("y")

        def value(p):
            p = np.atleast_2d(p)
            return e(x=p[:, 0], y=p[:, 1])

        def grad(p):
            p = np.atleast_2d(p)
            return np.stack([ex(x=p[:, 0], y=p[:, 1]), ey(x=p[:, 0], y=p[:, 1])], axis=1)

        return cls(value, grad, text)

    @classmethod
    def constant(cls, c: float) -> ScalarData:
        return cls(lambda p: np.full(len(np.atleast_2d(p)), float(c)), lambda p: np.zeros((len(np.atleast_2d(p)), 2)), repr(c))

    def derivative_along(self, X: VectorField, points) -> np.ndarray:
        """Directional derivative grad f . X at the points."""
        return np.einsum("nd,nd->n", self.grad(points), X.value(points))


def _as_data(v):
    if v is None or isinstance(v, ScalarData):
        return v
    if isinstance(v, str):
        return ScalarData.from_expression(v)
    if np.isscalar(v):
        return ScalarData.constant(v)
    return v  # nodal array, fixed in reference coordinates


# ---------------------------------------------------------------------------
# algebraic core


@dataclass
class AlgebraicVI:
    """F(u) = K u + s(u) - b with u <= psi (psi may contain +inf)."""

    K: sp.spmatrix
    b: np.ndarray
    psi: np.ndarray
    semilinear: Optional[Callable] = None  # u -> (vector, sparse derivative)
    semilinear_value: Optional[Callable] = None  # u -> vector only (optional fast path)

    @property
    def n(self):
        return self.K.shape[0]

    def residual(self, u):
        r = self.K @ u - self.b
        if self.semilinear_value is not None:
            r = r + self.semilinear_value(u)
        elif self.semilinear is not None:
            r = r + self.semilinear(u)[0]
        return r

    def jacobian(self, u):
        if self.semilinear is None:
            return sp.csr_matrix(self.K)
        return sp.csr_matrix(self.K + self.semilinear(u)[1])

    def with_rhs(self, b):
        return AlgebraicVI(self.K, b, self.psi, self.semilinear, self.semilinear_value)


@dataclass
class VISolution:
    state: np.ndarray
    multiplier: np.ndarray
    active: np.ndarray  # boolean, nodes fixed to the obstacle by the solver
    psi: np.ndarray
    tol_act: float
    residuals: dict
    iterations: int = 0
    shifted: Optional[np.ndarray] = None  # y = u - psi (transported solves)

    @property
    def contact(self) -> np.ndarray:
        gap = self.psi - self.state
        return np.isfinite(self.psi) & (gap <= self.tol_act)

    @property
    def strongly_active(self) -> np.ndarray:
        return self.contact & (self.multiplier > self.tol_act)

    @property
    def biactive(self) -> np.ndarray:
        return self.contact & (self.multiplier <= self.tol_act)

    @property
    def inactive(self) -> np.ndarray:
        return ~self.contact


def kkt_residuals(system: AlgebraicVI, u, mu) -> dict:
    fin = np.isfinite(system.psi)
    gap = np.where(fin, system.psi - u, np.inf)
    r = system.residual(u) + mu
    return {
        "feasibility": float(max(0.0, np.max(-gap[fin], initial=-np.inf))),
        "sign": float(max(0.0, np.max(-mu, initial=0.0))),
        "complementarity": float(np.max(np.abs(mu[fin] * gap[fin]), initial=0.0)),
        "stationarity": float(np.max(np.abs(r), initial=0.0)),
        "multiplier_off_constraint": float(np.max(np.abs(mu[~fin]), initial=0.0)),
    }


DENSE_LIMIT = 200  # small systems: dense solves avoid sparse bookkeeping overhead


def _newton_reduced(system: AlgebraicVI, u, free, tol, max_newton=50):
    """Solve F_free(u) = 0 for u[free] with the other entries fixed."""
    if not np.any(free):
        return u
    idx = np.flatnonzero(free)
    linear = system.semilinear is None
    for _ in range(max_newton):
        F = system.residual(u)[idx]
        nrm = np.max(np.abs(F))
        if nrm <= tol:
            return u
        J = system.jacobian(u)
        if system.n <= DENSE_LIMIT:
            step = np.linalg.solve(J.toarray()[np.ix_(idx, idx)], -F)
        else:
            step = spla.spsolve(J[idx][:, idx].tocsc(), -F)
        if linear:
            u = u.copy()
            u[idx] += step
            continue
        s = 1.0
        while True:
            trial = u.copy()
            trial[idx] += s * step
            if np.max(np.abs(system.residual(trial)[idx])) < (1 - 1e-4 * s) * nrm or s < 1e-10:
                u = trial
                break
            s *= 0.5
    F = system.residual(u)[idx]
    if np.max(np.abs(F)) > max(tol, 1e-10):
        raise SolverError("inner Newton did not converge", float(np.max(np.abs(F))))
    return u


def pdas(system: AlgebraicVI, tol=1e-8, max_iters=200, u0=None, active0=None, tol_act=None) -> VISolution:
    """Primal-dual active set iteration with a Newton inner solve."""
    n = system.n
    psi = np.asarray(system.psi, dtype=float)
    fin = np.isfinite(psi)
    J0 = system.jacobian(np.zeros(n) if u0 is None else u0)
    c = float(np.mean(J0.diagonal()))
    inner = min(tol, 1e-11) * 1e-2
    u = np.zeros(n) if u0 is None else np.array(u0, dtype=float)
    if active0 is not None:
        active = np.asarray(active0, dtype=bool) & fin
    elif u0 is not None:
        active = fin & (u >= psi)
    else:
        active = np.zeros(n, dtype=bool)
    seen = set()
    for it in range(1, max_iters + 1):
        u = np.where(active, psi, np.where(fin, np.minimum(u, psi), u))
        u = _newton_reduced(system, u, ~active, inner)
        mu = np.zeros(n)
        mu[active] = -system.residual(u)[active]
        new = fin & (mu + c * (u - psi) > 0)
        if np.array_equal(new, active):
            break
        key = new.tobytes()
        if key in seen:
            # degenerate (biactive) sets can flip on round-off; keep an iterate that already satisfies KKT
            chk = kkt_residuals(system, u, mu)
            if max(chk["feasibility"], chk["sign"], chk["complementarity"], chk["stationarity"]) <= tol:
                break
            raise SolverError("active-set iteration cycles", float(np.max(np.abs(mu))))
        seen.add(active.tobytes())
        active = new
    else:
        raise SolverError("active-set iteration did not converge", kkt_residuals(system, u, mu)["stationarity"])
    res = kkt_residuals(system, u, mu)
    if tol_act is None:
        tol_act = 1e-8 * (1.0 + float(np.max(np.abs(mu), initial=0.0)))
    worst = max(res["feasibility"], res["sign"], res["complementarity"], res["stationarity"])
    if worst > tol:
        raise SolverError("solution violates KKT tolerances", worst)
    return VISolution(u, mu, active, psi, tol_act, res, it)


def brute_force_vi(system: AlgebraicVI, tol=1e-10, max_constrained=14) -> VISolution:
    """Enumerate every active set on the constrained nodes and keep the KKT-consistent one."""
    psi = np.asarray(system.psi, dtype=float)
    fin = np.flatnonzero(np.isfinite(psi))
    if len(fin) > max_constrained:
        raise SolverError(f"{len(fin)} constrained nodes exceed the enumeration limit {max_constrained}")
    n = system.n
    found = []
    for r in range(len(fin) + 1):
        for combo in itertools.combinations(fin, r):
            active = np.zeros(n, dtype=bool)
            active[list(combo)] = True
            u = np.where(active, psi, 0.0)
            try:
                u = _newton_reduced(system, u, ~active, 1e-13)
            except SolverError:
                continue
            mu = np.zeros(n)
            mu[active] = -system.residual(u)[active]
            if np.all(u[fin] <= psi[fin] + tol) and np.all(mu >= -tol):
                if not any(np.max(np.abs(u - f.state)) <= 1e-9 for f in found):
                    res = kkt_residuals(system, u, mu)
                    found.append(VISolution(u, mu, active, psi, tol, res, 0))
    if not found:
        raise SolverError("no KKT-consistent active set found")
    if len(found) > 1:
        raise SolverError(f"{len(found)} distinct KKT points found; problem is not monotone")
    return found[0]


# ---------------------------------------------------------------------------
# mesh-level problems


@dataclass
class ObstacleProblem:
    """lam > 0, density w(x, u), obstacle psi (expression, constant, nodal array or inf), load f.

    Scalar problems carry natural (Neumann) boundary conditions.
    """

    mesh: Mesh
    lam: float
    density: SemilinearDensity = field(default_factory=SemilinearDensity.zero)
    obstacle: object = np.inf
    load: object = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        self.obstacle = _as_data(self.obstacle)
        self.load = _as_data(self.load)

    def obstacle_values(self, geom: Geometry) -> np.ndarray:
        ob = self.obstacle
        if isinstance(ob, ScalarData):
            vals = ob.value(geom.mapped_nodes)
        else:
            vals = np.broadcast_to(np.asarray(ob, dtype=float), (self.mesh.n_vertices,)).copy()
        if np.any(np.isnan(vals)) or np.any(vals == -np.inf):
            raise ValueError("obstacle must be finite or +inf at every node")
        return vals

    def obstacle_rate(self, X: VectorField) -> np.ndarray:
        """psi-dot: derivative of psi o Phi_t at t = 0."""
        if isinstance(self.obstacle, ScalarData):
            return self.obstacle.derivative_along(X, self.mesh.vertices)
        return np.zeros(self.mesh.n_vertices)

    def load_vector(self, geom: Geometry) -> np.ndarray:
        if self.load is None:
            return np.zeros(self.mesh.n_vertices)
        if isinstance(self.load, ScalarData):
            return assemble_load(geom, self.load.value)
        return geom.lumped * np.asarray(self.load, dtype=float)

    def system(self, geom: Optional[Geometry] = None) -> AlgebraicVI:
        geom = geom or Geometry.reference(self.mesh)
        K = assemble_bilinear(geom, self.lam)
        ev = SemilinearEvaluator(geom, self.density)
        return AlgebraicVI(K, self.load_vector(geom), self.obstacle_values(geom), ev, ev.value)

    def energy_system(self, geom=None):
        return self.system(geom)


def solve_obstacle_semilinear(problem: ObstacleProblem, tol=1e-8, check_density=True, **kw) -> VISolution:
    if check_density:
        problem.density.check_monotone(problem.mesh)
    sol = pdas(problem.system(), tol=tol, **kw)
    sol.shifted = _shift(sol.state, sol.psi)
    return sol


def _shift(u, psi):
    return np.where(np.isfinite(psi), u - psi, u)


def solve_transported(problem: ObstacleProblem, X: VectorField, t: float, tol=1e-8, **kw) -> VISolution:
    """Solve the pulled-back problem at time t; ``shifted`` holds y^t = u^t - psi^t."""
    geom = Geometry.transported(problem.mesh, X, t)
    sol = pdas(problem.system(geom), tol=tol, **kw)
    sol.shifted = _shift(sol.state, sol.psi)
    return sol


def solve_on_deformed(problem: ObstacleProblem, X: VectorField, t: float, tol=1e-8) -> VISolution:
    """Solve on the image mesh Phi_t(Omega_h); nodal values then correspond to u_t o Phi_t."""
    from .mesh import deform
    from .flow import integrate_flow

    moved = deform(problem.mesh, lambda p: integrate_flow(X, t, p, problem.mesh.box)[0])
    other = ObstacleProblem(moved, problem.lam, problem.density, problem.obstacle, problem.load)
    return solve_obstacle_semilinear(other, tol=tol, check_density=False)


def energy(problem: ObstacleProblem, u, antiderivative: Optional[Callable] = None, geom=None) -> float:
    """Discrete energy 1/2 u'Ku + sum_i m_i W(u_i) - b'u for a density with known antiderivative W(x, u)."""
    geom = geom or Geometry.reference(problem.mesh)
    K = assemble_bilinear(geom, problem.lam)
    val = 0.5 * u @ (K @ u) - problem.load_vector(geom) @ u
    if antiderivative is not None:
        val += float(geom.lumped @ antiderivative(geom.mapped_nodes, u))
    return float(val)


# ---------------------------------------------------------------------------
# p-Laplace


P_EPS = 1e-8


@dataclass
class PLaplaceResult:
    u: np.ndarray
    energies: list
    iterations: int


def _p_energy_parts(mesh: Mesh, geom: Geometry, p: float, u, b):
    Gt = np.einsum("tkd,tde->tke", mesh.grads, geom.inv_jac)  # rows: (dPhi^-T grad phi_k)^T
    g = np.einsum("tk,tkd->td", u[mesh.triangles], Gt)
    s = np.einsum("td,td->t", g, g) + P_EPS**2
    w = mesh.areas * geom.xi_elem
    E = float(np.sum(w * s ** (p / 2)) / p - b @ u)
    return Gt, g, s, w, E


def p_laplace_energy(mesh: Mesh, p: float, u, b, geom=None) -> float:
    geom = geom or Geometry.reference(mesh)
    return _p_energy_parts(mesh, geom, p, np.asarray(u, dtype=float), b)[-1]


def solve_p_laplace(mesh: Mesh, p: float, f=1.0, X: Optional[VectorField] = None, t: float = 0.0,
                    tol=1e-10, max_iters=200) -> PLaplaceResult:
    """Minimise (1/p) int xi |dPhi^-T grad u|^p - f(Phi_t) u with zero Dirichlet data by damped Newton."""
    if not (1.0 < p <= 8.0):
        raise ValueError("p must lie in (1, 8]")
    geom = Geometry.transported(mesh, X, t) if (X is not None and t != 0.0) else Geometry.reference(mesh)
    f = _as_data(f)
    b = assemble_load(geom, f.value) if isinstance(f, ScalarData) else geom.lumped * np.asarray(f, dtype=float)
    n = mesh.n_vertices
    free = np.ones(n, dtype=bool)
    free[mesh.boundary_nodes] = False
    idx = np.flatnonzero(free)
    tri = mesh.triangles

    def parts(u, q):
        return _p_energy_parts(mesh, geom, q, u, b)

    def grad_hess(u, q):
        Gt, g, s, w, E = parts(u, q)
        a = w * s ** (q / 2 - 1)
        Gg = np.einsum("tkd,td->tk", Gt, g)
        grad = np.bincount(tri.ravel(), weights=(a[:, None] * Gg).ravel(), minlength=n) - b
        loc = a[:, None, None] * np.einsum("tid,tjd->tij", Gt, Gt)
        loc += ((q - 2) * w * s ** (q / 2 - 2))[:, None, None] * np.einsum("ti,tj->tij", Gg, Gg)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        H = sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))
        return E, grad, H

    u = np.zeros(n)
    if not np.any(b):
        return PLaplaceResult(u, [0.0], 0)
    # p = 2 start: one Newton step from zero solves the quadratic problem
    _, gr, H = grad_hess(u, 2.0)
    u[idx] = spla.spsolve(H[idx][:, idx].tocsc(), -gr[idx])
    if p == 2.0:
        return PLaplaceResult(u, [parts(u, p)[-1]], 1)
    energies = [parts(u, p)[-1]]
    for it in range(1, max_iters + 1):
        E, gr, H = grad_hess(u, p)
        step = np.zeros(n)
        step[idx] = spla.spsolve(H[idx][:, idx].tocsc(), -gr[idx])
        dec = -float(gr[idx] @ step[idx])
        if dec <= tol * max(1.0, abs(E)):
            break
        s = 1.0
        while True:
            trial = u + s * step
            Et = parts(trial, p)[-1]
            if Et <= E - 1e-4 * s * dec:
                break
            s *= 0.5
            if s < 1e-14:
                if dec < 1e-12 * max(1.0, abs(E)):
                    return PLaplaceResult(u, energies, it)
                raise SolverError("p-Laplace line search failed", dec)
        u = trial
        energies.append(Et)
    else:
        raise SolverError("p-Laplace Newton did not converge", dec)
    return PLaplaceResult(u, energies, it)
