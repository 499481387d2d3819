"""Command-line entry point: ``vishape <command> --config <path> [--out <dir>]``."""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import damage as dmg
from .cones import ConeError, fd_material_oracle, solve_material_derivative, state_shape_derivative, y_cone
from .config import COMMANDS, ConfigError, RunConfig, list_demos, load_config, validate
from .expr import ExprError
from .fem import AssemblyError
from .flow import FlowError
from .mesh import MeshError, field_csv
from .sensitivity import obstacle_rate_sweep, p_laplace_rate_sweep
from .vi import SolverError, solve_obstacle_semilinear

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


# ---------------------------------------------------------------------------
# deterministic output


def fmt(x) -> str:
    return format(float(x), ".17g")


def to_json(obj) -> str:
    """JSON with sorted keys and every float written with 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{to_json(str(k))}: {to_json(v)}" for k, v in sorted(obj.items())) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if math.isfinite(obj):
            return fmt(obj)
        return '"inf"' if obj > 0 else ('"-inf"' if obj < 0 else '"nan"')
    s = str(obj).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{s}"'


def threads() -> int:
    try:
        return max(1, int(os.environ.get("VISHAPE_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


class Output:
    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def write(self, name, text):
        (self.dir / name).write_text(text if text.endswith("\n") else text + "\n")
        self.files.append(name)

    def json(self, name, obj):
        self.write(name, to_json(obj))


# ---------------------------------------------------------------------------
# commands


def cmd_solve_vi(cfg: RunConfig, out: Output):
    prob = cfg.problem()
    tol = cfg.number("problem", "tol", 1e-8, float, lambda v: v > 0, "tol > 0")
    sol = solve_obstacle_semilinear(prob, tol=tol)
    out.write("solution.csv", field_csv(prob.mesh, sol.state, "u"))
    out.write("multiplier.csv", field_csv(prob.mesh, sol.multiplier, "mu"))
    res = dict(sol.residuals)
    res.update(iterations=sol.iterations, active=int(sol.active.sum()), biactive=int(sol.biactive.sum()))
    out.json("residuals.json", res)
    worst = max(res["feasibility"], res["sign"], res["complementarity"], res["stationarity"])
    return f"solve-vi: {sol.iterations} iterations, {int(sol.active.sum())} active nodes, KKT residual {fmt(worst)}"


def cmd_rate_sweep(cfg: RunConfig, out: Output):
    X = cfg.field()
    ts = cfg.t_values()
    kind = cfg.get("problem", "kind")
    if kind == "obstacle":
        rep = obstacle_rate_sweep(cfg.problem(), X, ts)
        out.write("sweep.csv", rep.to_csv())
        out.json("sweep.json", rep.summary())
        return f"rate-sweep: slope {fmt(rep.slope)} exponent {fmt(rep.exponent)} pass={rep.passed}"
    mesh = cfg.mesh()
    summary = []
    for p in cfg.p_values():
        rep = p_laplace_rate_sweep(mesh, p, X, ts)
        tag = format(p, "g")
        out.write(f"sweep_p{tag}.csv", rep.to_csv())
        out.json(f"sweep_p{tag}.json", rep.summary())
        summary.append(rep.summary())
    out.json("sweep.json", {"runs": summary})
    return "rate-sweep: " + ", ".join(f"p={fmt(s['p'])} slope={fmt(s['slope'])} pass={s['pass']}" for s in summary)


def cmd_material_derivative(cfg: RunConfig, out: Output):
    prob = cfg.problem()
    X = cfg.field()
    ts = cfg.t_values("0.1, 0.01, 0.001")
    tol_act = cfg.number("problem", "tol_act", 0.0, float, lambda v: v >= 0, "tol_act >= 0") or None
    tab = fd_material_oracle(prob, X, ts, tol_act=tol_act)
    out.write("rates.csv", tab.to_csv())
    out.write("ydot.csv", field_csv(prob.mesh, tab.derivative.ydot, "ydot"))
    cone_ok = y_cone(tab.derivative.cone).contains(tab.last_quotient, 1e-6)
    out.json("material.json", {
        "monotone": tab.monotone,
        "final_error_h1": tab.rows[-1].error_h1,
        "cone_ok": cone_ok,
        "equality_nodes": int(tab.derivative.cone.equality.sum()),
        "inequality_nodes": int(tab.derivative.cone.inequality.sum()),
    })
    return f"material-derivative: final error {fmt(tab.rows[-1].error_h1)} monotone={tab.monotone} cone_ok={cone_ok}"


def shape_derivative_levels(cfg: RunConfig):
    X = cfg.field()
    levels = cfg.number("mesh", "levels", 1, int, lambda v: v >= 1, "levels >= 1")
    rows = []
    for lev in range(levels):
        prob = cfg.problem(cfg.mesh(lev))
        sol = solve_obstacle_semilinear(prob, tol=1e-10)
        md = solve_material_derivative(prob, sol, X)
        up = state_shape_derivative(md.udot, sol.state, X, prob.mesh)
        rows.append((prob.mesh, up, prob.mesh.l2_norm(up)))
    return rows


def cmd_shape_derivative(cfg: RunConfig, out: Output):
    rows = shape_derivative_levels(cfg)
    norms = [r[2] for r in rows]
    out.write("uprime.csv", field_csv(rows[-1][0], rows[-1][1], "uprime"))
    ratios = [a / b if b > 0 else math.inf for a, b in zip(norms, norms[1:])]
    out.json("shape_derivative.json", {"l2_norms": norms, "reduction_factors": ratios,
                                       "vertices": [r[0].n_vertices for r in rows]})
    return "shape-derivative: ||u'||_L2 per level " + ", ".join(fmt(v) for v in norms)


def _catalog(cfg: RunConfig):
    amp = cfg.number("catalog", "amplitude", 0.2, float, lambda v: v > 0, "> 0")
    rad = cfg.number("catalog", "radius", 0.3, float, lambda v: v > 0, "> 0")
    return dmg.default_catalog(amp, rad)


def cmd_damage_run(cfg: RunConfig, out: Output):
    spec = cfg.damage()
    cs = cfg.cost()
    traj = dmg.run(spec)
    J = dmg.cost(traj, cs, spec)
    catalog = _catalog(cfg)
    names = list(catalog)
    dJ = pmap(lambda n: dmg.shape_derivative(spec, cs, catalog[n], traj), names)
    out.write("trajectory.csv", dmg.trajectory_csv(spec, traj))
    summary = {"J": J, "dJ_catalog": dJ, "max_principle_ok": traj.max_principle(),
               "dissipation_ok": traj.dissipation_ok()}
    out.json("summary.json", summary)
    out.json("diagnostics.json", {"catalog": names, "energies": traj.energies, "slacks": traj.slacks,
                                  "min_chi": traj.min_chi()})
    return (f"damage-run: J={fmt(J)} max_principle_ok={summary['max_principle_ok']} "
            f"dissipation_ok={summary['dissipation_ok']}")


def cmd_damage_dj(cfg: RunConfig, out: Output):
    spec = cfg.damage()
    cs = cfg.cost()
    X = cfg.field()
    ts = cfg.t_values("0.01, 0.001, 0.0001")
    traj = dmg.run(spec)
    J = dmg.cost(traj, cs, spec)
    dJ = dmg.shape_derivative(spec, cs, X, traj)
    fd = [dmg.finite_difference_dJ(spec, cs, X, t, J) for t in ts]
    lams = cfg.numbers("sweep", "lambdas", "0.5, 2, 10")
    homog = [dmg.shape_derivative(spec, cs, X.scaled(l), traj) for l in lams]
    rel = [abs(h - l * dJ) / max(abs(l * dJ), 1e-300) for h, l in zip(homog, lams)]
    lines = ["t,fd_quotient,abs_error"] + [f"{fmt(t)},{fmt(q)},{fmt(abs(q - dJ))}" for t, q in zip(ts, fd)]
    out.write("dj_fd.csv", "\n".join(lines))
    out.json("dj.json", {"J": J, "dJ": dJ, "t": ts, "fd": fd, "lambdas": lams, "homogeneity_rel_error": rel,
                         "max_principle_ok": traj.max_principle(), "dissipation_ok": traj.dissipation_ok()})
    return f"damage-dj: dJ={fmt(dJ)} fd(t={fmt(ts[-1])})={fmt(fd[-1])} max homogeneity error {fmt(max(rel))}"


def cmd_shape_descent(cfg: RunConfig, out: Output):
    spec = cfg.damage()
    cs = cfg.cost()
    res = dmg.shape_descent(
        spec, cs, _catalog(cfg),
        iterations=cfg.number("descent", "iterations", 20, int, lambda v: v >= 0, ">= 0"),
        step=cfg.number("descent", "step", 0.1, float, lambda v: v > 0, "> 0"),
        tol_opt=cfg.number("descent", "tol_opt", 1e-4, float, lambda v: v >= 0, ">= 0"),
    )
    out.write("final_mesh.txt", res.meshes[-1].to_text())
    out.json("descent.json", {"J": res.J, "directions": res.directions, "steps": res.steps,
                              "converged": res.converged})
    drop = 1 - res.J[-1] / res.J[0] if res.J[0] else 0.0
    return f"shape-descent: {len(res.directions)} iterations, J {fmt(res.J[0])} -> {fmt(res.J[-1])} ({fmt(100 * drop)}% lower)"


HANDLERS = {
    "solve-vi": cmd_solve_vi,
    "rate-sweep": cmd_rate_sweep,
    "material-derivative": cmd_material_derivative,
    "shape-derivative": cmd_shape_derivative,
    "damage-run": cmd_damage_run,
    "damage-dj": cmd_damage_dj,
    "shape-descent": cmd_shape_descent,
}

SOLVER_ERRORS = (SolverError, FlowError, MeshError, AssemblyError, dmg.DamageError, ConeError, ExprError,
                 np.linalg.LinAlgError)


def run(command: str, config_path, out_dir=None) -> int:
    try:
        cfg = load_config(config_path)
        validate(cfg, command)
        out = Output(out_dir or cfg.get("output", "directory", "vishape-out"))
    except ConfigError as exc:
        print(f"vishape: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        line = HANDLERS[command](cfg, out)
    except ConfigError as exc:
        print(f"vishape: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        mod = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"vishape: solver error [{mod}]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(line)
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vishape", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
    sub.add_parser("list-demos")
    p = sub.add_parser("demo", help="run a shipped demo config")
    p.add_argument("name")
    p.add_argument("--out")
    args = ap.parse_args(argv)
    if args.command == "list-demos":
        for name, path in list_demos().items():
            print(f"{name}\t{path}")
        return EXIT_OK
    if args.command == "demo":
        demos = list_demos()
        if args.name not in demos:
            print(f"vishape: config error: unknown demo {args.name!r}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            command = load_config(demos[args.name]).command
        except ConfigError as exc:
            print(f"vishape: config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return run(command, demos[args.name], args.out)
    return run(args.command, args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
