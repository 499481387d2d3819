"""P1 assembly of the transported bilinear, semilinear, elasticity and load terms.

All geometric coefficients enter through a :class:`Geometry`: the pullback data of a
flow at time t, sampled at element centroids (stiffness) and at vertices (mass-type
terms). ``Geometry.reference(mesh)`` is the untransformed case t = 0 and
:class:`GeometryRate` holds the matching first-order coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import PPoly

from .expr import Expression
from .flow import VectorField, first_order_coeffs, pullback_coeffs
from .mesh import Mesh


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Geometry:
    mesh: Mesh
    A: np.ndarray  # (ntri, 2, 2) at centroids
    xi_elem: np.ndarray
    inv_jac: np.ndarray  # (dPhi_t)^-1 at centroids
    xi_node: np.ndarray
    mapped_nodes: np.ndarray
    mapped_centroids: np.ndarray
    t: float = 0.0

    @classmethod
    def reference(cls, mesh: Mesh) -> Geometry:
        ne, nv = mesh.n_triangles, mesh.n_vertices
        I = np.tile(np.eye(2), (ne, 1, 1))
        return cls(mesh, I, np.ones(ne), I.copy(), np.ones(nv), mesh.vertices.copy(), mesh.centroids, 0.0)

    @classmethod
    def transported(cls, mesh: Mesh, X: VectorField, t: float) -> Geometry:
        if t == 0.0:
            return cls.reference(mesh)
        ce = pullback_coeffs(X, t, mesh.centroids, mesh.box)
        nd = pullback_coeffs(X, t, mesh.vertices, mesh.box)
        return cls(mesh, ce.A, ce.xi, ce.inv_jacobian, nd.xi, nd.mapped, ce.mapped, float(t))

    @property
    def lumped(self) -> np.ndarray:
        return self.mesh.lumped_mass * self.xi_node


@dataclass(frozen=True)
class GeometryRate:
    """t-derivatives at t = 0 of every Geometry entry."""

    mesh: Mesh
    Aprime: np.ndarray
    div_elem: np.ndarray
    jac_elem: np.ndarray  # dX at centroids; derivative of (dPhi_t)^-1 is -dX
    div_node: np.ndarray
    X_node: np.ndarray
    X_centroid: np.ndarray

    @classmethod
    def of(cls, mesh: Mesh, X: VectorField) -> GeometryRate:
        ce = first_order_coeffs(X, mesh.centroids)
        nd = first_order_coeffs(X, mesh.vertices)
        return cls(mesh, ce.Aprime, ce.xiprime, ce.jacobian, nd.xiprime, nd.value, ce.value)

    @property
    def lumped(self) -> np.ndarray:
        return self.mesh.lumped_mass * self.div_node


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadPoints:
    """Quadrature points: element, barycentric weights, reference positions, weights."""

    elem: np.ndarray
    bary: np.ndarray  # (m, 3)
    x: np.ndarray  # (m, 2)
    weight: np.ndarray  # area weights, no xi
    node: Optional[np.ndarray]  # vertex rule: the vertex each point sits on

    def moved(self, positions) -> QuadPoints:
        return QuadPoints(self.elem, self.bary, np.asarray(positions), self.weight, self.node)


def quadrature(mesh: Mesh, rule: str = "vertex") -> QuadPoints:
    ne = mesh.n_triangles
    elem = np.repeat(np.arange(ne), 3)
    weight = np.repeat(mesh.areas / 3.0, 3)
    if rule == "vertex":
        bary = np.tile(np.eye(3), (ne, 1))
        node = mesh.triangles.ravel().copy()
    elif rule == "midpoint":
        bary = np.tile(np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]), (ne, 1))
        node = None
    else:
        raise AssemblyError(f"unknown quadrature rule {rule!r}")
    x = np.einsum("mk,mkd->md", bary, mesh.vertices[mesh.triangles[elem]])
    return QuadPoints(elem, bary, x, weight, node)


def _qp_xi(geom: Geometry, q: QuadPoints, rate: bool = False):
    """xi (or xi'(0) for a GeometryRate) at the quadrature points."""
    tri = geom.mesh.triangles[q.elem]
    vals = geom.div_node if rate else geom.xi_node
    return np.einsum("mk,mk->m", q.bary, vals[tri])


def _qp_positions(geom: Geometry, q: QuadPoints):
    tri = geom.mesh.triangles[q.elem]
    return np.einsum("mk,mkd->md", q.bary, geom.mapped_nodes[tri])


def interpolate(mesh: Mesh, q: QuadPoints, values) -> np.ndarray:
    return np.einsum("mk,mk->m", q.bary, np.asarray(values)[mesh.triangles[q.elem]])


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True)
class SemilinearDensity:
    """w(q, y) and its y-derivative at quadrature points ``q`` (a QuadPoints).

    ``wdot(q, y, X_at_q)`` is the shape derivative of the transported density at fixed y.
    """

    w: Callable
    dyw: Callable
    wdot: Optional[Callable] = None
    name: str = "w"

    @classmethod
    def zero(cls):
        z = lambda q, y, *a: np.zeros(len(q.elem))  # noqa: E731
        return cls(z, z, z, "0")

    @classmethod
    def from_expression(cls, text: str) -> SemilinearDensity:
        """Density w(x, y, u) with u the state value."""
        e = Expression(text, ("x", "y", "u"))
        du, dx, dy = e.diff("u"), e.diff("x"), e.diff("y")

        def w(q, u):
            return e(x=q.x[:, 0], y=q.x[:, 1], u=u)

        def dyw(q, u):
            return du(x=q.x[:, 0], y=q.x[:, 1], u=u)

        def wdot(q, u, Xq):
            return dx(x=q.x[:, 0], y=q.x[:, 1], u=u) * Xq[:, 0] + dy(x=q.x[:, 0], y=q.x[:, 1], u=u) * Xq[:, 1]

        return cls(w, dyw, wdot, text)

    def check_monotone(self, mesh: Mesh, y_range=(-2.0, 2.0), samples=9, tol=1e-12) -> float:
        """Smallest sampled value of dyw; raises if the density is not monotone."""
        q = quadrature(mesh)
        worst = np.inf
        for y in np.linspace(*y_range, samples):
            worst = min(worst, float(np.min(self.dyw(q, np.full(len(q.elem), y)))))
        if worst < -tol:
            raise AssemblyError(f"density {self.name} is not monotone in y (dyw = {worst:.3e})")
        return worst

    def check_lipschitz(self, mesh: Mesh, y_range=(-2.0, 2.0), samples=9, bound=1e6):
        """Sampled Lipschitz constant in y; warns when it exceeds ``bound``."""
        q = quadrature(mesh)
        lip = 0.0
        for y in np.linspace(*y_range, samples):
            lip = max(lip, float(np.max(np.abs(self.dyw(q, np.full(len(q.elem), y))))))
        if lip > bound:
            warnings.warn(f"density {self.name}: sampled y-Lipschitz constant {lip:.3e} is large")
        return lip


# ---------------------------------------------------------------------------
# scalar forms


def _scatter(mesh: Mesh, local: np.ndarray, n=None):
    """Sum (ntri, 3, 3) element matrices into a CSR matrix in fixed element order."""
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = n or mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def stiffness(mesh: Mesh, A: np.ndarray) -> sp.csr_matrix:
    """sum_T |T| A_T grad(phi_i) . grad(phi_j) with elementwise constant A."""
    if not np.all(np.isfinite(A)):
        raise AssemblyError("non-finite coefficient matrix")
    G = mesh.grads
    local = mesh.areas[:, None, None] * np.einsum("tid,tde,tje->tij", G, A, G)
    return _scatter(mesh, local)


def mass(geom: Geometry, coeff=None, rule: str = "vertex") -> sp.csr_matrix:
    """Weighted mass matrix int xi * coeff * phi_i phi_j (coeff given per vertex)."""
    mesh = geom.mesh
    c = np.ones(mesh.n_vertices) if coeff is None else np.asarray(coeff, dtype=float)
    if rule == "vertex":
        return sp.diags(geom.lumped * c).tocsr()
    q = quadrature(mesh, rule)
    wq = q.weight * _qp_xi(geom, q) * interpolate(mesh, q, c)
    local = np.einsum("m,mi,mj->mij", wq, q.bary, q.bary)
    local = local.reshape(mesh.n_triangles, 3, 3, 3).sum(axis=1)
    return _scatter(mesh, local)


def assemble_bilinear(geom: Geometry, lam: float, rule: str = "vertex") -> sp.csr_matrix:
    """Matrix of a^t(v, z) = int A(t) grad v . grad z + xi(t) lam v z."""
    eig = np.linalg.eigvalsh(0.5 * (geom.A + np.transpose(geom.A, (0, 2, 1))))
    if np.any(eig[:, 0] <= 0.0):
        raise AssemblyError(f"coefficient matrix not SPD on element {int(np.argmin(eig[:, 0]))}")
    return (stiffness(geom.mesh, geom.A) + lam * mass(geom, rule=rule)).tocsr()


def assemble_semilinear(geom: Geometry, density: SemilinearDensity, state, shift=None, rule: str = "vertex"):
    """Vector int xi w(x, state+shift) phi_i and matrix int xi dyw phi_i phi_j.

    The density is evaluated at the mapped positions Phi_t(x) of the quadrature points.
    """
    mesh = geom.mesh
    v = np.asarray(state, dtype=float)
    if shift is not None:
        v = v + np.asarray(shift, dtype=float)
    q = quadrature(mesh, rule)
    qm = q.moved(_qp_positions(geom, q))
    yq = interpolate(mesh, q, v)
    wv = np.asarray(density.w(qm, yq), dtype=float)
    dv = np.asarray(density.dyw(qm, yq), dtype=float)
    if not (np.all(np.isfinite(wv)) and np.all(np.isfinite(dv))):
        raise AssemblyError(f"non-finite value of density {density.name}")
    wt = q.weight * _qp_xi(geom, q)
    n = mesh.n_vertices
    if rule == "vertex":
        vec = np.bincount(q.node, weights=wt * wv, minlength=n)
        diag = np.bincount(q.node, weights=wt * dv, minlength=n)
        return vec, sp.diags(diag).tocsr()
    tri = mesh.triangles[q.elem]
    vec = np.bincount(tri.ravel(), weights=((wt * wv)[:, None] * q.bary).ravel(), minlength=n)
    local = np.einsum("m,mi,mj->mij", wt * dv, q.bary, q.bary).reshape(mesh.n_triangles, 3, 3, 3).sum(axis=1)
    return vec, _scatter(mesh, local)


class SemilinearEvaluator:
    """assemble_semilinear with quadrature data cached for one geometry; ``value`` skips the matrix."""

    def __init__(self, geom: Geometry, density: SemilinearDensity, rule: str = "vertex"):
        self.geom, self.density, self.rule = geom, density, rule
        q = quadrature(geom.mesh, rule)
        self.q = q
        self.qm = q.moved(_qp_positions(geom, q))
        self.wt = q.weight * _qp_xi(geom, q)

    def value(self, state) -> np.ndarray:
        mesh = self.geom.mesh
        v = np.asarray(state, dtype=float)
        yq = interpolate(mesh, self.q, v)
        wv = np.asarray(self.density.w(self.qm, yq), dtype=float)
        if not np.all(np.isfinite(wv)):
            raise AssemblyError(f"non-finite value of density {self.density.name}")
        if self.rule == "vertex":
            return np.bincount(self.q.node, weights=self.wt * wv, minlength=mesh.n_vertices)
        tri = mesh.triangles[self.q.elem]
        return np.bincount(tri.ravel(), weights=((self.wt * wv)[:, None] * self.q.bary).ravel(),
                           minlength=mesh.n_vertices)

    def __call__(self, state):
        return assemble_semilinear(self.geom, self.density, state, rule=self.rule)


def assemble_load(geom: Geometry, f, rule: str = "vertex") -> np.ndarray:
    """Load vector int xi f(Phi_t(x)) phi_i for scalar f; vector f gives interleaved 2n entries.

    ``f`` is a callable on (m, 2) positions or a constant.
    """
    mesh = geom.mesh
    q = quadrature(mesh, rule)
    pos = _qp_positions(geom, q)
    vals = f(pos) if callable(f) else np.broadcast_to(np.asarray(f, dtype=float), (len(pos),) + np.shape(f))
    vals = np.asarray(vals, dtype=float)
    wt = q.weight * _qp_xi(geom, q)
    tri = mesh.triangles[q.elem]
    if vals.ndim == 1:
        return np.bincount(tri.ravel(), weights=((wt * vals)[:, None] * q.bary).ravel(), minlength=mesh.n_vertices)
    out = np.zeros(2 * mesh.n_vertices)
    for c in range(2):
        out[c::2] = np.bincount(
            tri.ravel(), weights=((wt * vals[:, c])[:, None] * q.bary).ravel(), minlength=mesh.n_vertices
        )
    return out


def apply_dirichlet(A: sp.spmatrix, b: np.ndarray, dofs, values):
    """Symmetric elimination: identity rows/columns on ``dofs``, lifted right-hand side."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise AssemblyError("Dirichlet index out of range")
    g = np.zeros(n)
    g[dofs] = values
    rhs = np.asarray(b, dtype=float) - A @ g
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sp.diags(keep) @ A @ sp.diags(keep)
    fixed = np.zeros(n)
    fixed[dofs] = 1.0
    K = (K + sp.diags(fixed)).tocsr()
    rhs[dofs] = g[dofs]
    return K, rhs


# ---------------------------------------------------------------------------
# degradation profiles and elasticity


class Profile:
    """C^2 scalar profile with first and second derivatives (piecewise cubic)."""

    def __init__(self, pp: PPoly, name=""):
        self.pp = pp
        self.d1 = pp.derivative(1)
        self.d2 = pp.derivative(2)
        self.name = name

    @classmethod
    def from_second_derivative(cls, knots, values, name=""):
        """Integrate a piecewise-linear second derivative twice (zero value and slope at knots[0])."""
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        slopes = np.diff(values) / np.diff(knots)
        c = np.vstack([slopes, values[:-1]])
        dd = PPoly(c, knots, extrapolate=True)
        return cls(dd.antiderivative(2), name)

    @classmethod
    def affine(cls, a, b, name=""):
        return cls(PPoly(np.array([[b], [a]]), np.array([-1e300, 1e300])), name)

    def __call__(self, x):
        return self.pp(x)


def stiffness_profile(eta=0.05, delta=0.1) -> Profile:
    """q with q = 0 for x <= 0, q(1) = 1, convex, C^2 and linear beyond 1 + delta; c1 = eta + (1-eta) q."""
    a = 1.0 / ((delta / 2 - delta**2 / 3) + (1 - delta) ** 2 / 2)
    knots = [-1.0, 0.0, delta, 1.0, 1.0 + delta, 3.0]
    q2 = [0.0, 0.0, a, a, 0.0, 0.0]
    q = Profile.from_second_derivative(knots, q2, "q")
    c = PPoly(q.pp.c * (1 - eta), q.pp.x, extrapolate=True)
    c.c[-1] += eta
    return Profile(c, "c1")


def ramp_profile(beta=1.0, delta=0.1) -> Profile:
    """beta * m with m a C^2 convex ramp: zero for x <= 0, slope one for x >= delta."""
    peak = 2.0 / delta
    knots = [-1.0, 0.0, 0.5 * delta, delta, 3.0]
    m2 = [0.0, 0.0, beta * peak, 0.0, 0.0]
    return Profile.from_second_derivative(knots, m2, "g1")


ZERO_PROFILE = Profile.affine(0.0, 0.0, "0")


@dataclass(frozen=True)
class ElasticityTensor:
    """Isotropic C with damage coefficient c = c1 + c2 (c1 convex, c2 concave)."""

    lame_lambda: float = 1.0
    lame_mu: float = 1.0
    c1: Profile = None
    c2: Profile = ZERO_PROFILE
    eta: float = 0.05

    def __post_init__(self):
        if self.c1 is None:
            object.__setattr__(self, "c1", stiffness_profile(self.eta))
        if self.lame_mu <= 0 or self.lame_lambda < 0:
            raise AssemblyError("Lame parameters need mu > 0 and lambda >= 0")

    def c(self, x):
        return self.c1(x) + self.c2(x)

    def dc(self, x):
        return self.c1.d1(x) + self.c2.d1(x)

    def check(self, lo=-1.0, hi=2.0, samples=301, tol=1e-10):
        x = np.linspace(lo, hi, samples)
        if np.min(self.c(x)) < self.eta - tol:
            raise AssemblyError("degradation c drops below eta")
        h = x[1] - x[0]
        sd1 = (self.c1(x[2:]) - 2 * self.c1(x[1:-1]) + self.c1(x[:-2])) / h**2
        sd2 = (self.c2(x[2:]) - 2 * self.c2(x[1:-1]) + self.c2(x[:-2])) / h**2
        if np.min(sd1) < -1e-6 or np.max(sd2) > 1e-6:
            raise AssemblyError("c1 must be convex and c2 concave")

    @property
    def D(self) -> np.ndarray:
        lam, mu = self.lame_lambda, self.lame_mu
        return np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])

    def energy_density(self, eps: np.ndarray) -> np.ndarray:
        """C eps : eps for symmetric (..., 2, 2) strains."""
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return self.lame_lambda * tr**2 + 2 * self.lame_mu * np.einsum("...ij,...ij->...", eps, eps)

    def stress(self, eps: np.ndarray) -> np.ndarray:
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return self.lame_lambda * tr[..., None, None] * np.eye(2) + 2 * self.lame_mu * eps


def element_c(mesh: Mesh, tensor: ElasticityTensor, chi, deriv=0) -> np.ndarray:
    """Vertex-quadrature average of c(chi) (or c'(chi)) on each element."""
    chi = np.asarray(chi, dtype=float)
    f = tensor.c if deriv == 0 else tensor.dc
    return f(chi)[mesh.triangles].mean(axis=1)


def strain_operator(mesh: Mesh, inv_jac: np.ndarray) -> np.ndarray:
    """Voigt strain matrices (ntri, 3, 6) for eps^t(u) = sym(du (dPhi_t)^-1)."""
    G = np.einsum("tkd,tde->tke", mesh.grads, inv_jac)  # row k: (dPhi^-T grad phi_k)^T
    B = np.zeros((mesh.n_triangles, 3, 6))
    B[:, 0, 0::2] = G[:, :, 0]
    B[:, 1, 1::2] = G[:, :, 1]
    B[:, 2, 0::2] = G[:, :, 1]
    B[:, 2, 1::2] = G[:, :, 0]
    return B


def element_strain(mesh: Mesh, u, inv_jac=None) -> np.ndarray:
    """Elementwise strain tensors (ntri, 2, 2) of an interleaved displacement vector."""
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    du = np.einsum("tka,tkd->tad", u[mesh.triangles], mesh.grads)  # du_a/dx_d
    if inv_jac is not None:
        du = np.einsum("tad,tde->tae", du, inv_jac)
    return 0.5 * (du + np.transpose(du, (0, 2, 1)))


def displacement_gradient(mesh: Mesh, u) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    return np.einsum("tka,tkd->tad", u[mesh.triangles], mesh.grads)


def _scatter_vec(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    dofs = np.stack([2 * t, 2 * t + 1], axis=2).reshape(-1, 6)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_elasticity(geom: Geometry, tensor: ElasticityTensor, chi, coeff=None) -> sp.csr_matrix:
    """Matrix of int xi c(chi) C eps^t(u) : eps^t(phi) on interleaved vector P1.

    ``coeff`` overrides the elementwise c(chi) factor when given.
    """
    mesh = geom.mesh
    c_el = element_c(mesh, tensor, chi) if coeff is None else np.asarray(coeff, dtype=float)
    if coeff is None and np.any(c_el < tensor.eta - 1e-12):
        raise AssemblyError("degradation coefficient below eta")
    B = strain_operator(mesh, geom.inv_jac)
    w = mesh.areas * geom.xi_elem * c_el
    local = w[:, None, None] * np.einsum("tai,ab,tbj->tij", B, tensor.D, B)
    return _scatter_vec(mesh, local)


def vector_mass(geom: Geometry) -> np.ndarray:
    """Lumped vector mass (diagonal entries, interleaved)."""
    return np.repeat(geom.lumped, 2)


def rigid_modes(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    modes = np.zeros((3, 2 * mesh.n_vertices))
    modes[0, 0::2] = 1.0
    modes[1, 1::2] = 1.0
    modes[2, 0::2] = -v[:, 1]
    modes[2, 1::2] = v[:, 0]
    return modes


def assemble_elasticity_rate(rate: GeometryRate, tensor: ElasticityTensor, chi, chidot) -> sp.csr_matrix:
    """t-derivative at t = 0 of the transported elasticity matrix along chi^t with rate chidot."""
    mesh = rate.mesh
    c_el = element_c(mesh, tensor, chi)
    cdot = (tensor.dc(np.asarray(chi, dtype=float)) * np.asarray(chidot, dtype=float))[mesh.triangles].mean(axis=1)
    B0 = strain_operator(mesh, np.tile(np.eye(2), (mesh.n_triangles, 1, 1)))
    Bd = strain_operator(mesh, -rate.jac_elem)
    D = tensor.D
    a = mesh.areas
    local = ((rate.div_elem * c_el + cdot) * a)[:, None, None] * np.einsum("tai,ab,tbj->tij", B0, D, B0)
    cross = np.einsum("tai,ab,tbj->tij", Bd, D, B0)
    local += (a * c_el)[:, None, None] * (cross + np.transpose(cross, (0, 2, 1)))
    return _scatter_vec(mesh, local)


def voigt_strain(mesh: Mesh, u, inv_jac) -> np.ndarray:
    """Elementwise Voigt strains [e11, e22, 2 e12] of an interleaved displacement."""
    B = strain_operator(mesh, inv_jac)
    u = np.asarray(u, dtype=float)
    t = mesh.triangles
    ue = np.stack([u[2 * t], u[2 * t + 1]], axis=2).reshape(-1, 6)
    return np.einsum("tai,ti->ta", B, ue)
