"""Small arithmetic expression language with symbolic differentiation.

Grammar (precedence low to high)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

``bump(x, y, cx, cy, r)`` is the C-infinity mollifier ``exp(1 - 1/(1 - s))`` with
``s = ((x-cx)^2 + (y-cy)^2) / r^2`` for ``s < 1`` and zero elsewhere (value 1 at the centre).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "sqrt": 1, "bump": 5}
CONSTANTS = {"pi": math.pi}


class ExprError(ValueError):
    """Raised for malformed expressions; ``offset`` is a byte offset into the source."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# tree


class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Bin(Node):
    op: str
    a: Node
    b: Node


@dataclass(frozen=True)
class Neg(Node):
    a: Node


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node


@dataclass(frozen=True)
class Moll(Node):
    """k-th derivative of the mollifier profile m(s) = exp(1 - 1/(1-s))."""

    order: int
    s: Node


ZERO, ONE = Num(0.0), Num(1.0)


def _add(a, b):
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Bin("+", a, b)


def _sub(a, b):
    if b == ZERO:
        return a
    if a == ZERO:
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Bin("-", a, b)


def _mul(a, b):
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Bin("*", a, b)


def _div(a, b):
    if a == ZERO:
        return ZERO
    if b == ONE:
        return a
    return Bin("/", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.a
    return Neg(a)


def _pow(a, b):
    if b == ONE:
        return a
    if b == ZERO:
        return ONE
    return Bin("^", a, b)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m.end() == pos or (m.group(0).strip() == ""):
            break
        num, name, op = m.groups()
        start = len(text[: m.end() - len(m.group(0).lstrip())].encode())
        if num is not None:
            tokens.append(("num", num, start))
        elif name is not None:
            tokens.append(("name", name, start))
        else:
            if op not in "+-*/^(),":
                raise ExprError(f"unexpected character {op!r}", start)
            tokens.append(("op", op, start))
        pos = m.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


class _Parser:
    def __init__(self, text, variables):
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val, off = self.take()
        if kind != "op" or val != op:
            raise ExprError(f"expected {op!r}", off)

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprError(f"unexpected {val!r}", off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            rhs = self.term()
            node = _add(node, rhs) if op == "+" else _sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            rhs = self.unary()
            node = Bin(op, node, rhs)
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            inner = self.unary()
            return inner if val == "+" else _neg(inner)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(val, off)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            if val not in self.variables:
                raise ExprError(f"unknown identifier {val!r}", off)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise ExprError("unexpected end of expression", off)
        raise ExprError(f"unexpected {val!r}", off)

    def call(self, name, off):
        if name not in FUNCTIONS:
            raise ExprError(f"unknown function {name!r}", off)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ExprError(f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}", off)
        if name == "bump":
            x, y, cx, cy, r = args
            dx, dy = Bin("-", x, cx), Bin("-", y, cy)
            s = Bin("/", Bin("+", Bin("*", dx, dx), Bin("*", dy, dy)), Bin("*", r, r))
            return Moll(0, s)
        return Call(name, args[0])


# ---------------------------------------------------------------------------
# evaluation and differentiation


def _moll_poly(order):
    """Coefficients P_k with m^(k)(s) = m(s) P_k(z), z = 1/(1-s)."""
    p = np.polynomial.Polynomial([1.0])
    z2 = np.polynomial.Polynomial([0.0, 0.0, 1.0])
    for _ in range(order):
        p = z2 * (p.deriv() - p)
    return p


def _moll_eval(order, s):
    s = np.asarray(s, dtype=float)
    flat = np.atleast_1d(s).ravel()
    out = np.zeros_like(flat)
    inside = flat < 1.0
    z = 1.0 / (1.0 - flat[inside])
    base = np.exp(1.0 - z)
    live = base > 0.0
    vals = np.zeros_like(z)
    vals[live] = base[live] * _moll_poly(order)(z[live])
    out[inside] = vals
    return out.reshape(s.shape)


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log_abs": lambda a: np.log(np.abs(a)),
}


def evaluate(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -evaluate(node.a, env)
    if isinstance(node, Bin):
        a, b = evaluate(node.a, env), evaluate(node.b, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return a / b
        return np.power(a, b)
    if isinstance(node, Call):
        return _FUNCS[node.name](evaluate(node.arg, env))
    if isinstance(node, Moll):
        return _moll_eval(node.order, evaluate(node.s, env))
    raise TypeError(node)


def differentiate(node, var):
    d = differentiate
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return _neg(d(node.a, var))
    if isinstance(node, Bin):
        a, b = node.a, node.b
        da, db = d(a, var), d(b, var)
        if node.op == "+":
            return _add(da, db)
        if node.op == "-":
            return _sub(da, db)
        if node.op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if node.op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), Bin("*", b, b))
        # a^b
        if isinstance(b, Num):
            return _mul(_mul(b, _pow(a, Num(b.value - 1.0))), da)
        term = _mul(db, Call("log_abs", a))
        return _mul(node, _add(term, _mul(b, _div(da, a))))
    if isinstance(node, Call):
        inner = d(node.arg, var)
        if inner == ZERO:
            return ZERO
        x = node.arg
        if node.name == "sin":
            outer = Call("cos", x)
        elif node.name == "cos":
            outer = _neg(Call("sin", x))
        elif node.name == "exp":
            outer = node
        elif node.name == "sqrt":
            outer = _div(Num(0.5), node)
        else:
            raise ExprError(f"cannot differentiate {node.name}")
        return _mul(outer, inner)
    if isinstance(node, Moll):
        inner = d(node.s, var)
        if inner == ZERO:
            return ZERO
        return _mul(Moll(node.order + 1, node.s), inner)
    raise TypeError(node)


class Expression:
    """A parsed expression over a fixed set of variable names.

    >>> e = Expression("x^2 + 3*y", ("x", "y"))
    >>> float(e(x=2.0, y=1.0))
    7.0
    >>> float(e.diff("x")(x=2.0, y=1.0))
    4.0
    """

    def __init__(self, text, variables=("x", "y"), _tree=None):
        self.text = text
        self.variables = tuple(variables)
        self.tree = _tree if _tree is not None else _Parser(text, set(self.variables)).parse()

    def __call__(self, **env):
        missing = [v for v in self.variables if v not in env]
        if missing:
            raise ExprError(f"missing value for {missing[0]!r}")
        shape = np.broadcast(*[np.asarray(env[v]) for v in self.variables]).shape if env else ()
        val = evaluate(self.tree, env)
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy() if shape else np.asarray(val, dtype=float)

    def diff(self, var) -> Expression:
        if var not in self.variables:
            raise ExprError(f"unknown variable {var!r}")
        return Expression(f"d({self.text})/d{var}", self.variables, differentiate(self.tree, var))

    @property
    def is_zero(self) -> bool:
        return self.tree == ZERO

    def __repr__(self):
        return f"Expression({self.text!r})"
