"""Analytic field expressions: parsing, vectorised evaluation, symbolic derivatives.

Grammar (see README for the EBNF)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' ['-'] INTEGER)*
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

``^`` binds tighter than unary minus (``-x^2 == -(x^2)``) and, like every
binary operator, associates to the left.  Exponents are integer literals.

Functions: ``sin``, ``cos``, ``exp``, ``sqrt`` and the compactly supported
``bump(cx, cy, r)``.  Differentiating a bump yields ``supp(cx, cy, r, body)``:
``body`` inside the open disk, exactly 0 outside.  Both are C-infinity.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EvalError, ParseError

DEFAULT_VARIABLES: tuple[str, ...] = ("x", "y")
UNARY_FUNCTIONS = ("sin", "cos", "exp", "sqrt")


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expr:
    """Immutable expression node; subclasses implement evaluation and printing."""

    __slots__ = ()

    def __call__(self, **env):
        return evaluate(self, env)

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True, eq=True)
class Const(Expr):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str  # one of + - * /
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True, eq=True)
class Call(Expr):
    fn: str
    arg: Expr


@dataclass(frozen=True, eq=True)
class Supp(Expr):
    """``body`` inside the open disk |(x, y) - (cx, cy)| < r, zero outside.

    ``is_bump`` marks the canonical bump body so it prints back as ``bump(...)``.
    """

    cx: float
    cy: float
    r: float
    body: Expr
    is_bump: bool = False


ZERO = Const(0.0)
ONE = Const(1.0)


def _bump_body(cx: float, cy: float, r: float) -> Expr:
    rho2 = add(Pow(sub(Var("x"), Const(cx)), 2), Pow(sub(Var("y"), Const(cy)), 2))
    r2 = Const(r * r)
    return Call("exp", Neg(div(r2, sub(r2, rho2))))


def bump(cx: float, cy: float, r: float) -> Supp:
    """The smooth bump exp(-r^2 / (r^2 - rho^2)) centred at (cx, cy)."""
    if not r > 0:
        raise EvalError("bump radius must be positive", radius=r)
    return Supp(float(cx), float(cy), float(r), _bump_body(cx, cy, r), True)


# --- smart constructors with light constant folding -------------------------

def _is_const(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return BinOp("/", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(a: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const) and n > 0:
        return Const(a.value ** n)
    return Pow(a, n)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)

_ATOM_START = frozenset({"NUMBER", "NAME", "(", "-"})


@dataclass
class _Token:
    kind: str  # NUMBER | NAME | op char | EOF
    text: str
    offset: int


def _tokenize(src: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    n = len(src)
    while pos < n:
        if src[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {src[pos]!r}", offset=_byte_offset(src, pos),
                             expected=_ATOM_START)
        if m.group("num") is not None:
            tokens.append(_Token("NUMBER", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(_Token("NAME", m.group("name"), m.start("name")))
        else:
            tokens.append(_Token(m.group("op"), m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(_Token("EOF", "", n))
    return tokens


def _byte_offset(src: str, char_pos: int) -> int:
    return len(src[:char_pos].encode("utf-8"))


class _Parser:
    def __init__(self, src: str, variables: Sequence[str]):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0
        self.variables = tuple(variables)

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def fail(self, expected: frozenset[str], what: str | None = None):
        t = self.tok
        found = "end of input" if t.kind == "EOF" else repr(t.text)
        raise ParseError(what or f"unexpected {found}", offset=_byte_offset(self.src, t.offset),
                         expected=expected)

    def expect(self, kind: str) -> _Token:
        if self.tok.kind != kind:
            self.fail(frozenset({kind}))
        t = self.tok
        self.i += 1
        return t

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "EOF":
            self.fail(frozenset({"+", "-", "*", "/", "^", "EOF"}))
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok.kind in ("+", "-"):
            op = self.tok.kind
            self.i += 1
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.tok.kind in ("*", "/"):
            op = self.tok.kind
            self.i += 1
            e = BinOp(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.tok.kind == "-":
            self.i += 1
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while self.tok.kind == "^":
            self.i += 1
            sign = 1
            if self.tok.kind == "-":
                sign = -1
                self.i += 1
            t = self.tok
            if t.kind != "NUMBER" or not t.text.isdigit():
                self.fail(frozenset({"INTEGER"}), "exponent must be an integer literal")
            self.i += 1
            e = Pow(e, sign * int(t.text))
        return e

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "NUMBER":
            self.i += 1
            return Const(float(t.text))
        if t.kind == "(":
            self.i += 1
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "NAME":
            self.i += 1
            if self.tok.kind == "(":
                return self.call(t)
            if t.text in self.variables:
                return Var(t.text)
            if t.text == "pi":
                return Const(math.pi)
            self.i -= 1
            self.fail(frozenset(self.variables) | {"pi"}, f"unknown identifier {t.text!r}")
        self.fail(_ATOM_START)
        raise AssertionError  # unreachable

    def call(self, name_tok: _Token) -> Expr:
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == ",":
            self.i += 1
            args.append(self.expr())
        close = self.tok
        self.expect(")")
        fn = name_tok.text
        if fn in UNARY_FUNCTIONS:
            if len(args) != 1:
                self._arity(name_tok, fn, 1, close)
            return Call(fn, args[0])
        if fn in ("bump", "supp"):
            want = 3 if fn == "bump" else 4
            if len(args) != want:
                self._arity(name_tok, fn, want, close)
            consts = []
            for a in args[:3]:
                try:
                    consts.append(float(evaluate(a, {})))
                except (EvalError, KeyError):
                    raise ParseError(f"{fn} centre and radius must be constants",
                                     offset=_byte_offset(self.src, name_tok.offset),
                                     expected=frozenset({"NUMBER"})) from None
            if consts[2] <= 0:
                raise ParseError(f"{fn} radius must be positive",
                                 offset=_byte_offset(self.src, name_tok.offset),
                                 expected=frozenset({"NUMBER"}))
            if fn == "bump":
                return bump(*consts)
            return Supp(consts[0], consts[1], consts[2], args[3], False)
        raise ParseError(f"unknown function {fn!r}", offset=_byte_offset(self.src, name_tok.offset),
                         expected=frozenset(UNARY_FUNCTIONS + ("bump", "supp")))

    def _arity(self, name_tok, fn, want, close):
        raise ParseError(f"{fn} takes {want} argument(s)", offset=_byte_offset(self.src, close.offset),
                         expected=frozenset({","} if want > 1 else {")"}))


def parse_field(src: str, variables: Sequence[str] = DEFAULT_VARIABLES) -> Expr:
    """Parse ``src`` into an expression over ``variables`` (default ``x``, ``y``)."""
    return _Parser(src, variables).parse()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(e: Expr, env: Mapping[str, object]):
    """Evaluate ``e`` with numpy broadcasting over the arrays in ``env``."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return np.asarray(env[e.name], dtype=float)
        except KeyError:
            raise EvalError(f"variable {e.name!r} not bound", variable=e.name) from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, BinOp):
        a = evaluate(e.left, env)
        b = evaluate(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0.0):
            raise EvalError("division by zero", expression=to_string(e))
        return a / b
    if isinstance(e, Pow):
        a = evaluate(e.base, env)
        if e.exponent < 0:
            if np.any(np.asarray(a) == 0.0):
                raise EvalError("division by zero in negative power", expression=to_string(e))
            return 1.0 / np.asarray(a, dtype=float) ** (-e.exponent)
        return np.asarray(a, dtype=float) ** e.exponent
    if isinstance(e, Call):
        a = evaluate(e.arg, env)
        if e.fn == "sin":
            return np.sin(a)
        if e.fn == "cos":
            return np.cos(a)
        if e.fn == "exp":
            return np.exp(a)
        if np.any(np.asarray(a) < 0.0):
            raise EvalError("sqrt of a negative number", expression=to_string(e))
        return np.sqrt(a)
    if isinstance(e, Supp):
        x = np.asarray(env["x"] if "x" in env else 0.0, dtype=float)
        y = np.asarray(env["y"] if "y" in env else 0.0, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        inside = (x - e.cx) ** 2 + (y - e.cy) ** 2 < e.r * e.r
        out = np.zeros(x.shape)
        if np.any(inside):
            sub_env = {k: (np.broadcast_to(np.asarray(v, dtype=float), x.shape)[inside]
                           if np.ndim(v) else v) for k, v in env.items()}
            sub_env["x"], sub_env["y"] = x[inside], y[inside]
            out[inside] = evaluate(e.body, sub_env)
        return out if out.ndim else float(out)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Symbolic differentiation
# ---------------------------------------------------------------------------

def diff(e: Expr, var: str) -> Expr:
    """Exact symbolic partial derivative of ``e`` with respect to ``var``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, var))
    if isinstance(e, BinOp):
        da, db = diff(e.left, var), diff(e.right, var)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, e.right), mul(e.left, db))
        # (a/b)' = a'/b - a b' / b^2
        return sub(div(da, e.right), div(mul(e.left, db), power(e.right, 2)))
    if isinstance(e, Pow):
        n = e.exponent
        return mul(mul(Const(float(n)), power(e.base, n - 1)), diff(e.base, var))
    if isinstance(e, Call):
        da = diff(e.arg, var)
        if e.fn == "sin":
            return mul(Call("cos", e.arg), da)
        if e.fn == "cos":
            return neg(mul(Call("sin", e.arg), da))
        if e.fn == "exp":
            return mul(e, da)
        return div(da, mul(Const(2.0), e))
    if isinstance(e, Supp):
        db = diff(e.body, var)
        if _is_const(db, 0.0):
            return ZERO
        return Supp(e.cx, e.cy, e.r, db, False)
    raise TypeError(f"not an expression: {e!r}")


def grad(e: Expr, variables: Sequence[str] = DEFAULT_VARIABLES) -> tuple[Expr, ...]:
    """Symbolic gradient (partials in the order of ``variables``)."""
    return tuple(diff(e, v) for v in variables)


# ---------------------------------------------------------------------------
# Pretty printing (re-parseable)
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    s = repr(float(v))
    if s in ("inf", "-inf", "nan"):
        raise EvalError("non-finite constant cannot be printed")
    return s if v >= 0 else f"({s})"


def to_string(e: Expr) -> str:
    """Render ``e`` so that ``parse_field(to_string(e))`` evaluates identically."""
    return _show(e, 0)


def _show(e: Expr, ctx: int) -> str:
    if isinstance(e, Const):
        return _fmt_num(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        s = "-" + _show(e.arg, 3)
        return f"({s})" if ctx > 0 else s
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        # left-assoc: the right operand needs strictly higher precedence
        s = f"{_show(e.left, p)} {e.op} {_show(e.right, p + 1)}"
        return f"({s})" if ctx > p else s
    if isinstance(e, Pow):
        return f"{_show(e.base, 4)}^{e.exponent}" if e.exponent >= 0 else f"{_show(e.base, 4)}^-{-e.exponent}"
    if isinstance(e, Call):
        return f"{e.fn}({_show(e.arg, 0)})"
    if isinstance(e, Supp):
        args = ", ".join(repr(float(v)) for v in (e.cx, e.cy, e.r))
        if e.is_bump:
            return f"bump({args})"
        return f"supp({args}, {_show(e.body, 0)})"
    raise TypeError(f"not an expression: {e!r}")


def variables_of(e: Expr) -> set[str]:
    """Names of the variables occurring in ``e`` (bump/supp imply x and y)."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, (Neg,)):
        return variables_of(e.arg)
    if isinstance(e, BinOp):
        return variables_of(e.left) | variables_of(e.right)
    if isinstance(e, Pow):
        return variables_of(e.base)
    if isinstance(e, Call):
        return variables_of(e.arg)
    if isinstance(e, Supp):
        return {"x", "y"} | variables_of(e.body)
    return set()


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

class VectorField:
    """A two-component field over (x, y) with its symbolic 2x2 Jacobian.

    ``gradient()[i][j]`` is the partial of component ``i`` with respect to
    coordinate ``j``; :meth:`eval_grad` returns arrays shaped ``(..., 2, 2)``.
    """

    def __init__(self, components: Sequence[Expr | str]):
        comps = tuple(parse_field(c) if isinstance(c, str) else c for c in components)
        if len(comps) != 2:
            raise ValueError("a vector field has exactly two components")
        self.components: tuple[Expr, Expr] = comps  # type: ignore[assignment]
        self._grad: tuple[tuple[Expr, Expr], tuple[Expr, Expr]] | None = None
        self._hess = None

    @classmethod
    def parse(cls, sources: Sequence[str]) -> "VectorField":
        return cls([parse_field(s) for s in sources])

    @classmethod
    def zero(cls) -> "VectorField":
        return cls([ZERO, ZERO])

    def gradient(self) -> tuple[tuple[Expr, Expr], tuple[Expr, Expr]]:
        if self._grad is None:
            self._grad = tuple(grad(c) for c in self.components)  # type: ignore[assignment]
        return self._grad  # type: ignore[return-value]

    def scaled(self, a: float) -> "VectorField":
        return VectorField([mul(Const(float(a)), c) for c in self.components])

    def is_zero(self) -> bool:
        return all(_is_const(c, 0.0) for c in self.components)

    def eval(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.empty(x.shape + (2,))
        for i, c in enumerate(self.components):
            out[..., i] = evaluate(c, {"x": x, "y": y})
        return out

    def eval_grad(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.empty(x.shape + (2, 2))
        for i, row in enumerate(self.gradient()):
            for j, c in enumerate(row):
                out[..., i, j] = evaluate(c, {"x": x, "y": y})
        return out

    def __str__(self) -> str:
        return "(" + ", ".join(to_string(c) for c in self.components) + ")"

    def __repr__(self) -> str:
        return f"VectorField{self}"


def check_compact_support(v: VectorField, mesh, tol: float = 1e-12, n_points: int = 4) -> bool:
    """True iff |v| and |grad v| are <= ``tol`` at every Gauss point of the
    OUTER and GAMMA_OMEGA boundary edges of ``mesh`` (and at their end points)."""
    from .mesh import GAMMA_OMEGA, OUTER

    sel = np.isin(mesh.boundary_tags, (OUTER, GAMMA_OMEGA))
    if not np.any(sel):
        return True
    e = mesh.boundary_edges[sel]
    a, b = mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]]
    s, _ = np.polynomial.legendre.leggauss(n_points)
    s = np.concatenate([0.5 * (s + 1.0), [0.0, 1.0]])
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    x, y = pts[..., 0], pts[..., 1]
    val = np.abs(v.eval(x, y)).max()
    g = np.abs(v.eval_grad(x, y)).max()
    return bool(val <= tol and g <= tol)
