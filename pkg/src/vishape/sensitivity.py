"""Rate sweeps and checklists for the abstract sensitivity estimates."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem import Geometry
from .flow import VectorField, fit_slope
from .mesh import Mesh
from .vi import ObstacleProblem, solve_p_laplace, solve_transported

DEFAULT_TS = tuple(2.0**-k for k in range(3, 10))
T_FLOOR = 2.0**-12


@dataclass
class RateReport:
    t: list
    errors: list
    slope: Optional[float]
    residual: Optional[float]
    exponent: float
    passed: bool
    failures: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def cumulative_slopes(self):
        out = []
        for k in range(1, len(self.t) + 1):
            out.append(fit_slope(self.t[:k], self.errors[:k]) if k >= 2 else None)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,error,slope_cum\n")
        for t, e, s in zip(self.t, self.errors, self.cumulative_slopes()):
            buf.write(f"{t:.17g},{e:.17g},{'' if s is None else format(s, '.17g')}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        slope = self.slope
        if slope is not None and math.isinf(slope):
            slope = "inf"
        return {"slope": slope, "exponent": self.exponent, "pass": self.passed, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _fit(ts, errs):
    slope = fit_slope(ts, errs)
    if slope is None or math.isinf(slope):
        return slope, None
    lt, le = np.log(ts), np.log(errs)
    c = np.polyfit(lt, le, 1)
    return slope, float(np.sqrt(np.mean((np.polyval(c, lt) - le) ** 2)))


def rate_sweep(solve: Callable, reference, t_sequence=DEFAULT_TS, norm: Callable = None, exponent=1.0,
               floor=T_FLOOR) -> RateReport:
    """Errors ||solve(t) - reference|| and their log-log slope; pass iff slope >= exponent - 0.1."""
    ts = sorted({float(t) for t in t_sequence if t >= floor}, reverse=True)
    if len(ts) < 3:
        raise ValueError("a rate sweep needs at least three t values above the floor")
    ref = np.asarray(reference, dtype=float)
    norm = norm or (lambda v: float(np.max(np.abs(v))))
    kept_t, errs, failures = [], [], []
    for t in ts:
        try:
            e = float(norm(np.asarray(solve(t), dtype=float) - ref))
        except Exception as exc:  # partial report
            failures.append((t, str(exc)))
            continue
        kept_t.append(t)
        errs.append(e)
    slope, resid = _fit(kept_t, errs) if len(kept_t) >= 2 else (None, None)
    ok = slope is not None and not failures and slope >= exponent - 0.1
    return RateReport(kept_t, errs, slope, resid, exponent, bool(ok), failures)


def obstacle_rate_sweep(problem: ObstacleProblem, X: VectorField, t_sequence=DEFAULT_TS, tol=1e-10) -> RateReport:
    """H1 errors of y^t - y for a semilinear obstacle problem (Lipschitz exponent 1)."""
    base = solve_transported(problem, X, 0.0, tol=tol)
    return rate_sweep(lambda t: solve_transported(problem, X, t, tol=tol).shifted, base.shifted, t_sequence,
                      problem.mesh.h1_norm, 1.0)


def p_laplace_rate_sweep(mesh: Mesh, p: float, X: VectorField, t_sequence=DEFAULT_TS, f=1.0) -> RateReport:
    """W1p-seminorm errors of the transported p-Laplace minimiser.

    For p = 2 the asserted exponent is 1; for p < 2 it is 1/(p-1); for p > 2 it is
    max(1/p, 1/(p-1)). Both exponents are recorded.
    """
    base = solve_p_laplace(mesh, p, f).u
    if p == 2.0:
        expo = 1.0
    elif p < 2.0:
        expo = 1.0 / (p - 1.0)
    else:
        expo = max(1.0 / p, 1.0 / (p - 1.0))
    rep = rate_sweep(lambda t: solve_p_laplace(mesh, p, f, X, t).u, base, t_sequence,
                     lambda v: mesh.w1p_seminorm(v, p), expo)
    rep.extra = {"p": p, "exponent_energy": 1.0 / p, "exponent_operator": 1.0 / (p - 1.0)}
    return rep


# ---------------------------------------------------------------------------
# checklists


@dataclass
class O2Report:
    t: list
    pairings: list
    constant: float
    slope: Optional[float]
    passed: bool


def check_O2(problem: ObstacleProblem, probes, X: VectorField, t_sequence=DEFAULT_TS) -> O2Report:
    """max over probe pairs of |<F_t(u) - F_0(u), u - v>| / ||u - v||_H1 as a function of t."""
    ts = [float(t) for t in t_sequence]
    mesh = problem.mesh
    F0 = problem.system()
    base = [(F0.residual(u), u, v) for u, v in probes]
    vals = []
    for t in ts:
        Ft = problem.system(Geometry.transported(mesh, X, t))
        g = 0.0
        for r0, u, v in base:
            d = u - v
            nd = mesh.h1_norm(d)
            if nd > 0:
                g = max(g, abs(float((Ft.residual(u) - r0) @ d)) / nd)
        vals.append(g)
    # first-order constant: the ratio at the smallest t
    c = vals[-1] / ts[-1] if ts else 0.0
    slope = fit_slope(ts, vals)
    ok = slope is not None and (math.isinf(slope) or slope >= 0.9)
    return O2Report(ts, vals, float(c), slope, bool(ok))


def check_monotonicity(problem: ObstacleProblem, samples=50, X: Optional[VectorField] = None, t=0.0, seed=0,
                       scale=1.0) -> float:
    """Worst sampled quotient <F(v) - F(z), v - z> / ||v - z||_H1^2."""
    rng = np.random.default_rng(seed)
    geom = Geometry.transported(problem.mesh, X, t) if X is not None and t != 0.0 else None
    sys = problem.system(geom)
    n = problem.mesh.n_vertices
    worst = math.inf
    for _ in range(samples):
        v = scale * rng.standard_normal(n)
        z = scale * rng.standard_normal(n)
        d = v - z
        q = float((sys.residual(v) - sys.residual(z)) @ d) / problem.mesh.h1_norm(d) ** 2
        worst = min(worst, q)
    return worst


def monotonicity_bound(lam: float, at_edge=False) -> float:
    """Lower bound asserted for check_monotonicity: min(1, lam), halved near the validity edge."""
    return 0.5 * min(1.0, lam) if at_edge else min(1.0, lam)
