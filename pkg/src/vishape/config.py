"""INI run configuration: parsing, validation and construction of model objects."""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .damage import CostSpec, DamageModelSpec, SpaceTimeScalar, SpaceTimeVector
from .expr import ExprError
from .fem import ElasticityTensor, SemilinearDensity, ramp_profile, stiffness_profile
from .flow import VectorField
from .mesh import disk_mesh, refine_uniform, unit_square_mesh
from .vi import ObstacleProblem

COMMANDS = (
    "solve-vi",
    "rate-sweep",
    "material-derivative",
    "shape-derivative",
    "damage-run",
    "damage-dj",
    "shape-descent",
)

DEMO_DIR = Path(__file__).parent / "demos"


class ConfigError(ValueError):
    pass


def _floats(text, key):
    try:
        return [float(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"[{key}] expects a comma-separated list of numbers") from None


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    path: str

    # -- raw access -------------------------------------------------------
    def has(self, section, key):
        return self.parser.has_option(section, key)

    def get(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        if default is None:
            raise ConfigError(f"missing required key {section}.{key}")
        return default

    def number(self, section, key, default=None, kind=float, check=None, what=""):
        raw = self.get(section, key, None if default is None else str(default))
        try:
            val = kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot read {raw!r} as a number") from None
        if check is not None and not check(val):
            raise ConfigError(f"{section}.{key} = {raw} is out of range ({what})")
        return val

    def numbers(self, section, key, default=None):
        return _floats(self.get(section, key, default), f"{section}.{key}")

    @property
    def command(self):
        return self.get("run", "command", "")

    # -- builders ---------------------------------------------------------
    def mesh(self, level=0):
        kind = self.get("mesh", "kind", "square")
        n = self.number("mesh", "n", 8, int, lambda v: v >= 1, "n >= 1")
        if kind == "square":
            m = unit_square_mesh(n)
        elif kind == "disk":
            m = disk_mesh(n)
        else:
            raise ConfigError(f"mesh.kind must be square or disk, got {kind!r}")
        for _ in range(self.number("mesh", "refine", 0, int, lambda v: v >= 0, "refine >= 0") + level):
            m = refine_uniform(m)
        return m

    def field(self) -> VectorField:
        xe = self.get("field", "x_expr")
        ye = self.get("field", "y_expr")
        sup = self.numbers("field", "support", "-1, 2, -1, 2")
        if len(sup) != 4 or sup[0] >= sup[1] or sup[2] >= sup[3]:
            raise ConfigError("field.support must be [x0, x1, y0, y1] with x0 < x1 and y0 < y1")
        try:
            return VectorField.from_expressions(xe, ye, tuple(sup))
        except ExprError as exc:
            raise ConfigError(f"field expression: {exc}") from None

    def problem(self, mesh=None) -> ObstacleProblem:
        mesh = mesh or self.mesh()
        lam = self.number("problem", "lambda", None, float, lambda v: v > 0, "lambda > 0")
        try:
            dens = SemilinearDensity.from_expression(self.get("problem", "density", "0"))
            ob = self.get("problem", "obstacle", "inf")
            obstacle = np.inf if ob.lower() in ("inf", "+inf", "none") else ob
            load = self.get("problem", "load", "") or None
            return ObstacleProblem(mesh, lam, dens, obstacle, load)
        except ExprError as exc:
            raise ConfigError(f"problem expression: {exc}") from None

    def p_values(self):
        ps = self.numbers("problem", "p", "2")
        for p in ps:
            if not (1.0 < p <= 8.0):
                raise ConfigError(f"problem.p = {p} is out of range (1 < p <= 8)")
        return ps

    def t_values(self, default="0.125, 0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625, 0.001953125"):
        ts = self.numbers("sweep", "t", default)
        if any(t <= 0 for t in ts):
            raise ConfigError("sweep.t entries must be positive")
        return sorted(ts, reverse=True)

    def damage(self, mesh=None) -> DamageModelSpec:
        mesh = mesh or self.mesh()
        s = "damage"
        tau = self.number(s, "tau", None, float, lambda v: v > 0, "tau > 0")
        N = self.number(s, "N", None, int, lambda v: v >= 0, "N >= 0")
        try:
            tensor = ElasticityTensor(
                self.number(s, "lame_lambda", 1.0, float, lambda v: v >= 0, "lambda_e >= 0"),
                self.number(s, "lame_mu", 1.0, float, lambda v: v > 0, "mu_e > 0"),
                stiffness_profile(self.number(s, "eta", 0.05, float, lambda v: 0 < v < 1, "0 < eta < 1"),
                                  self.number(s, "delta", 0.1, float, lambda v: 0 < v < 1, "0 < delta < 1")),
                eta=self.number(s, "eta", 0.05),
            )
            g1 = ramp_profile(self.number(s, "beta", 0.5, float, lambda v: v >= 0, "beta >= 0"),
                              self.number(s, "delta_m", 0.1, float, lambda v: v > 0, "delta_m > 0"))

            def vec(name):
                return SpaceTimeVector(self.get(s, f"{name}_x", "0"), self.get(s, f"{name}_y", "0"))

            return DamageModelSpec(mesh, tau, N, tensor, g1, load=vec("load"), dirichlet=vec("dirichlet"),
                                   u0=vec("u0"), v0=vec("v0"), chi0=SpaceTimeScalar(self.get(s, "chi0", "1")))
        except ExprError as exc:
            raise ConfigError(f"damage expression: {exc}") from None

    def cost(self) -> CostSpec:
        s = "cost"
        try:
            return CostSpec(
                self.number(s, "lam_u", 1.0, float, lambda v: v >= 0, ">= 0"),
                self.number(s, "lam_chi", 1.0, float, lambda v: v >= 0, ">= 0"),
                SpaceTimeVector(self.get(s, "u_ref_x", "0"), self.get(s, "u_ref_y", "0")),
                SpaceTimeScalar(self.get(s, "chi_ref", "1")),
            )
        except ExprError as exc:
            raise ConfigError(f"cost expression: {exc}") from None


REQUIRED = {
    "solve-vi": [("problem", "lambda")],
    "rate-sweep": [("problem", "kind"), ("field", "x_expr"), ("field", "y_expr")],
    "material-derivative": [("problem", "lambda"), ("field", "x_expr"), ("field", "y_expr")],
    "shape-derivative": [("problem", "lambda"), ("field", "x_expr"), ("field", "y_expr")],
    "damage-run": [("damage", "tau"), ("damage", "N")],
    "damage-dj": [("damage", "tau"), ("damage", "N"), ("field", "x_expr"), ("field", "y_expr")],
    "shape-descent": [("damage", "tau"), ("damage", "N")],
}


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"parse error at line {line}: {msg}" if line else f"parse error: {msg}") from None
    return RunConfig(parser, str(path))


def validate(cfg: RunConfig, command: str):
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    for section, key in REQUIRED[command]:
        cfg.get(section, key)
    # touch every builder the command needs so range errors surface before solving
    cfg.mesh()
    if command in ("solve-vi", "material-derivative", "shape-derivative"):
        cfg.problem()
    if command == "rate-sweep":
        kind = cfg.get("problem", "kind")
        if kind == "obstacle":
            cfg.problem()
        elif kind == "p-laplace":
            cfg.p_values()
        else:
            raise ConfigError(f"problem.kind must be obstacle or p-laplace, got {kind!r}")
        cfg.t_values()
    if "field" in cfg.parser:
        cfg.field()
    if command.startswith("damage") or command == "shape-descent":
        cfg.damage()
        cfg.cost()


def list_demos() -> dict:
    return {p.stem: p for p in sorted(DEMO_DIR.glob("*.ini"))}
