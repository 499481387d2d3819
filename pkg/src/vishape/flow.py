"""Compactly supported velocity fields, their flows and the pullback coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .expr import Expression
from .mesh import DEFAULT_BOX

MIN_STEPS = 16
MAX_STEP = 1e-3


class FlowError(ValueError):
    pass


class VectorField:
    """Velocity field X with Jacobian, zero outside ``support`` = (x0, x1, y0, y1).

    ``value(p)`` maps an (n, 2) array to (n, 2); ``jacobian(p)`` to (n, 2, 2) with
    ``J[:, i, j] = dX_i/dx_j``.
    """

    def __init__(self, value: Callable, jacobian: Callable, support=DEFAULT_BOX, name="X"):
        self._value = value
        self._jacobian = jacobian
        self.support = tuple(float(s) for s in support)
        self.name = name

    @classmethod
    def from_expressions(cls, x_expr: str, y_expr: str, support=DEFAULT_BOX, name=None):
        ex = Expression(x_expr, ("x", "y"))
        ey = Expression(y_expr, ("x", "y"))
        dex = (ex.diff("x"), ex.diff("y"))
        dey = (ey.diff("x"), ey.diff("y"))

        def value(p):
            return np.stack([ex(x=p[:, 0], y=p[:, 1]), ey(x=p[:, 0], y=p[:, 1])], axis=1)

        def jac(p):
            x, y = p[:, 0], p[:, 1]
            J = np.empty((len(p), 2, 2))
            J[:, 0, 0], J[:, 0, 1] = dex[0](x=x, y=y), dex[1](x=x, y=y)
            J[:, 1, 0], J[:, 1, 1] = dey[0](x=x, y=y), dey[1](x=x, y=y)
            return J

        field = cls(value, jac, support, name or f"({x_expr}, {y_expr})")
        field.expressions = (x_expr, y_expr)
        return field

    @classmethod
    def zero(cls):
        return cls(lambda p: np.zeros((len(p), 2)), lambda p: np.zeros((len(p), 2, 2)), name="0")

    def _inside(self, p):
        x0, x1, y0, y1 = self.support
        return (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)

    def value(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.asarray(self._value(p), dtype=float).reshape(len(p), 2)
        return np.where(self._inside(p)[:, None], out, 0.0)

    def jacobian(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.asarray(self._jacobian(p), dtype=float).reshape(len(p), 2, 2)
        return np.where(self._inside(p)[:, None, None], out, 0.0)

    def divergence(self, points) -> np.ndarray:
        J = self.jacobian(points)
        return J[:, 0, 0] + J[:, 1, 1]

    def scaled(self, factor: float) -> VectorField:
        f = float(factor)
        field = VectorField(
            lambda p: f * self._value(p), lambda p: f * self._jacobian(p), self.support, f"{f:g}*{self.name}"
        )
        return field

    def __neg__(self):
        return self.scaled(-1.0)

    def check_jacobian(self, points, h=1e-6) -> float:
        """Max deviation of the Jacobian from central differences of the value."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        err = 0.0
        J = self.jacobian(p)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (self.value(p + e) - self.value(p - e)) / (2 * h)
            err = max(err, float(np.max(np.abs(fd - J[:, :, j]))))
        return err

    def __repr__(self):
        return f"VectorField({self.name})"


# ---------------------------------------------------------------------------
# catalog of named fields


def translation_bump(direction=(1.0, 0.0), center=(0.5, 0.5), radius=0.3, amplitude=1.0):
    """Uniform translation damped by the bump mollifier."""
    cx, cy = center
    dx, dy = direction
    b = f"bump(x,y,{cx!r},{cy!r},{radius!r})"
    return VectorField.from_expressions(
        f"{amplitude * dx!r}*{b}", f"{amplitude * dy!r}*{b}", _box(center, radius),
        name=f"translation_bump{tuple(direction)}@{tuple(center)}",
    )


def rotation_bump(center=(0.5, 0.5), radius=0.3, amplitude=1.0):
    """Rigid rotation about ``center`` damped by a bump; tangential to circles around it."""
    cx, cy = center
    b = f"bump(x,y,{cx!r},{cy!r},{radius!r})"
    return VectorField.from_expressions(
        f"{-amplitude!r}*(y-{cy!r})*{b}", f"{amplitude!r}*(x-{cx!r})*{b}", _box(center, radius),
        name=f"rotation_bump@{tuple(center)}",
    )


def normal_boundary_bump(point, normal, radius=0.25, amplitude=1.0):
    """Bump centred at a boundary point pushing along the given outward normal."""
    nx, ny = normal
    return translation_bump((nx, ny), point, radius, amplitude)


CATALOG = {
    "translation_bump": translation_bump,
    "rotation_bump": rotation_bump,
    "normal_boundary_bump": normal_boundary_bump,
}


def _box(center, radius):
    cx, cy = center
    return (cx - radius, cx + radius, cy - radius, cy + radius)


# ---------------------------------------------------------------------------
# flow


def step_count(t: float) -> int:
    return max(MIN_STEPS, int(math.ceil(abs(t) / MAX_STEP)))


def integrate_flow(X: VectorField, t: float, x0, box=DEFAULT_BOX):
    """Return (Phi_t(x0), dPhi_t(x0)) for an (n, 2) array of starting points.

    Classical RK4 on dPhi/dt = X(Phi) coupled with the variational equation
    d(dPhi)/dt = dX(Phi) dPhi, dPhi_0 = I.
    """
    p = np.array(np.atleast_2d(np.asarray(x0, dtype=float)))
    F = np.tile(np.eye(2), (len(p), 1, 1))
    if t == 0.0:
        return p, F
    n = step_count(t)
    h = t / n

    def rhs(p, F):
        return X.value(p), np.einsum("nij,njk->nik", X.jacobian(p), F)

    x0_, x1_, y0_, y1_ = box
    for _ in range(n):
        k1p, k1F = rhs(p, F)
        k2p, k2F = rhs(p + 0.5 * h * k1p, F + 0.5 * h * k1F)
        k3p, k3F = rhs(p + 0.5 * h * k2p, F + 0.5 * h * k2F)
        k4p, k4F = rhs(p + h * k3p, F + h * k3F)
        p = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        F = F + h / 6.0 * (k1F + 2 * k2F + 2 * k3F + k4F)
        if np.any(p[:, 0] < x0_) or np.any(p[:, 0] > x1_) or np.any(p[:, 1] < y0_) or np.any(p[:, 1] > y1_):
            raise FlowError("flow trajectory left the hold-all box")
    return p, F


class FlowMap:
    """Flow of X with a validated time horizon ``tau`` (det dPhi_t > 0 on samples)."""

    def __init__(self, field: VectorField, tau: float = 0.25, samples=None, box=DEFAULT_BOX):
        self.field = field
        self.tau = float(tau)
        self.box = box
        if samples is None:
            s = np.linspace(0.0, 1.0, 11)
            gx, gy = np.meshgrid(s, s)
            samples = np.stack([gx.ravel(), gy.ravel()], axis=1)
        for t in (-self.tau, self.tau):
            _, F = integrate_flow(field, t, samples, box)
            if np.any(np.linalg.det(F) <= 0):
                raise FlowError(f"det of flow Jacobian not positive for |t| <= {self.tau}")

    def __call__(self, t, points):
        if abs(t) > self.tau + 1e-15:
            raise FlowError(f"|t|={abs(t)} exceeds validated horizon {self.tau}")
        return integrate_flow(self.field, t, points, self.box)


# ---------------------------------------------------------------------------
# pullback data


@dataclass(frozen=True)
class PullbackCoefficients:
    """A = xi (dPhi)^-1 (dPhi)^-T and xi = det dPhi at a set of points."""

    A: np.ndarray
    xi: np.ndarray
    inv_jacobian: np.ndarray
    mapped: np.ndarray

    @classmethod
    def identity(cls, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(p)
        return cls(np.tile(np.eye(2), (n, 1, 1)), np.ones(n), np.tile(np.eye(2), (n, 1, 1)), p.copy())


@dataclass(frozen=True)
class FirstOrderCoefficients:
    """A'(0) = div(X) I - dX - dX^T and xi'(0) = div X, plus the field data itself."""

    Aprime: np.ndarray
    xiprime: np.ndarray
    jacobian: np.ndarray
    value: np.ndarray


def pullback_coeffs(X: VectorField, t: float, points, box=DEFAULT_BOX) -> PullbackCoefficients:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if t == 0.0:
        return PullbackCoefficients.identity(p)
    mapped, F = integrate_flow(X, t, p, box)
    xi = np.linalg.det(F)
    if np.any(xi <= 0.5):
        raise FlowError(f"det dPhi_t = {xi.min():.4g} <= 1/2: t={t} is outside the validity range")
    Finv = np.linalg.inv(F)
    A = xi[:, None, None] * np.einsum("nij,nkj->nik", Finv, Finv)
    A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    return PullbackCoefficients(A, xi, Finv, mapped)


def first_order_coeffs(X: VectorField, points) -> FirstOrderCoefficients:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    J = X.jacobian(p)
    div = J[:, 0, 0] + J[:, 1, 1]
    Ap = div[:, None, None] * np.eye(2)[None] - J - np.transpose(J, (0, 2, 1))
    return FirstOrderCoefficients(Ap, div, J, X.value(p))


def validity_time(X: VectorField, points, t_max=1.0, iters=40, box=DEFAULT_BOX) -> float:
    """Largest sampled t with A(t) >= I/2 and xi(t) >= 1/2, found by bisection."""

    def ok(t):
        try:
            mapped, F = integrate_flow(X, t, points, box)
        except FlowError:
            return False
        xi = np.linalg.det(F)
        if np.any(xi < 0.5):
            return False
        Finv = np.linalg.inv(F)
        A = xi[:, None, None] * np.einsum("nij,nkj->nik", Finv, Finv)
        return bool(np.all(np.linalg.eigvalsh(0.5 * (A + np.transpose(A, (0, 2, 1))))[:, 0] >= 0.5))

    if ok(t_max):
        return t_max
    lo, hi = 0.0, t_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def fit_slope(ts, errors):
    """Least-squares slope of log(error) against log(t); None if undefined."""
    ts = np.asarray(ts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(ts) < 2:
        return None
    if np.all(errors == 0.0):
        return math.inf
    if np.any(errors <= 0.0):
        keep = errors > 0.0
        ts, errors = ts[keep], errors[keep]
        if len(ts) < 2:
            return None
    return float(np.polyfit(np.log(ts), np.log(errors), 1)[0])


@dataclass
class FlowRateTable:
    t: list
    e_jacobian: list
    e_det: list
    e_A: list
    slopes: dict


def verify_flow_rates(X: VectorField, t_sequence, points=None, box=DEFAULT_BOX) -> FlowRateTable:
    """Sup-norm errors of the first-order expansions of dPhi_t, det dPhi_t and A(t)."""
    ts = [float(t) for t in t_sequence]
    if any(b >= a for a, b in zip(ts, ts[1:])) or any(t <= 0 for t in ts):
        raise FlowError("t_sequence must be positive and strictly decreasing")
    if points is None:
        s = np.linspace(0.0, 1.0, 21)
        gx, gy = np.meshgrid(s, s)
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    first = first_order_coeffs(X, points)
    e1, e2, e3 = [], [], []
    for t in ts:
        _, F = integrate_flow(X, t, points, box)
        xi = np.linalg.det(F)
        Finv = np.linalg.inv(F)
        A = xi[:, None, None] * np.einsum("nij,nkj->nik", Finv, Finv)
        e1.append(float(np.max(np.abs((F - np.eye(2)) / t - first.jacobian))))
        e2.append(float(np.max(np.abs((xi - 1.0) / t - first.xiprime))))
        e3.append(float(np.max(np.abs((A - np.eye(2)) / t - first.Aprime))))
    slopes = {
        "jacobian": fit_slope(ts, e1),
        "det": fit_slope(ts, e2),
        "A": fit_slope(ts, e3),
    }
    return FlowRateTable(ts, e1, e2, e3, slopes)
