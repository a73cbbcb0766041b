"""Bound-expression language for dependent parameter ranges.

Grammar (binary ops left-associative, ``*`` ``/`` bind tighter):

    expr   := term (("+" | "-") term)*
    term   := atom (("*" | "/") atom)*
    atom   := INT | IDENT | "floor" "(" expr ")"
            | ("min" | "max") "(" expr "," expr ")" | "(" expr ")"
    IDENT  := [a-z_][a-z0-9_.]*

Arithmetic is exact (``fractions.Fraction``); nothing is rounded until a
range is finally resolved to integer bounds.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Mapping, Optional, Union

FUNCS = ("floor", "min", "max")


class ExprError(Exception):
    """Base error for the expression language."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at offset {pos})")
        self.pos = pos


class ExprEvalError(ExprError):
    pass


class RangeResolutionError(ExprError):
    pass


class UnknownIdentifierError(RangeResolutionError):
    def __init__(self, identifier: str, context: str):
        super().__init__(f"unknown identifier {identifier!r} in {context}")
        self.identifier = identifier


class DependencyCycleError(RangeResolutionError):
    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class Ident:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expression", ...]


Expression = Union[Lit, Ident, BinOp, Call]


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Token:
    kind: str  # int | ident | op | lparen | rparen | comma | end
    text: str
    pos: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<int>\d+)
  | (?P<ident>[a-z_][a-z0-9_.]*)
  | (?P<op>[+\-*/])
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
""",
    re.VERBOSE,
)


def _tokenize(text: str) -> Iterator[_Token]:
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        assert kind is not None
        if kind != "ws":
            yield _Token(kind, m.group(), pos)
        pos = m.end()
    yield _Token("end", "", len(text))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.tokens = list(_tokenize(text))
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.cur
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Token:
        if self.cur.kind != kind:
            raise ExprSyntaxError(
                f"expected {kind}, found {self.cur.text or 'end of input'!r}", self.cur.pos
            )
        return self.advance()

    def parse(self) -> Expression:
        e = self.expr()
        if self.cur.kind != "end":
            raise ExprSyntaxError(f"trailing input {self.cur.text!r}", self.cur.pos)
        return e

    def expr(self) -> Expression:
        left = self.term()
        while self.cur.kind == "op" and self.cur.text in "+-":
            op = self.advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expression:
        left = self.atom()
        while self.cur.kind == "op" and self.cur.text in "*/":
            op = self.advance().text
            left = BinOp(op, left, self.atom())
        return left

    def atom(self) -> Expression:
        tok = self.cur
        if tok.kind == "int":
            self.advance()
            return Lit(int(tok.text))
        if tok.kind == "ident":
            self.advance()
            if self.cur.kind == "lparen":
                if tok.text not in FUNCS:
                    raise ExprSyntaxError(f"unknown function {tok.text!r}", tok.pos)
                self.advance()
                args = [self.expr()]
                while self.cur.kind == "comma":
                    self.advance()
                    args.append(self.expr())
                self.expect("rparen")
                arity = 1 if tok.text == "floor" else 2
                if len(args) != arity:
                    raise ExprSyntaxError(
                        f"{tok.text} takes exactly {arity} argument(s)", tok.pos
                    )
                return Call(tok.text, tuple(args))
            return Ident(tok.text)
        if tok.kind == "lparen":
            self.advance()
            e = self.expr()
            self.expect("rparen")
            return e
        raise ExprSyntaxError(f"expected a value, found {tok.text or 'end of input'!r}", tok.pos)


def parse_expr(text: str) -> Expression:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def print_expr(e: Expression) -> str:
    """Canonical rendering: reparsing the output reproduces the same AST."""
    return _print(e, 0, False)


def _print(e: Expression, parent_prec: int, is_right: bool) -> str:
    if isinstance(e, Lit):
        return str(e.value)
    if isinstance(e, Ident):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({', '.join(_print(a, 0, False) for a in e.args)})"
    prec = _PREC[e.op]
    text = f"{_print(e.left, prec, False)} {e.op} {_print(e.right, prec, True)}"
    # Left-assoc parse: a right child at equal precedence must keep its parens.
    if prec < parent_prec or (prec == parent_prec and is_right):
        return f"({text})"
    return text


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _as_fraction(value: Union[int, float, Fraction]) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # Decimal-exact conversion so facts like 12.5 stay clean ratios.
        return Fraction(str(value))
    raise ExprEvalError(f"non-numeric value {value!r}")


def evaluate(e: Expression, env: Mapping[str, Union[int, float, Fraction]]) -> Fraction:
    if isinstance(e, Lit):
        return Fraction(e.value)
    if isinstance(e, Ident):
        if e.name not in env:
            raise ExprEvalError(f"unbound identifier {e.name!r}")
        return _as_fraction(env[e.name])
    if isinstance(e, Call):
        args = [evaluate(a, env) for a in e.args]
        if e.func == "floor":
            return Fraction(math.floor(args[0]))
        if e.func == "min":
            return min(args)
        if e.func == "max":
            return max(args)
        raise ExprEvalError(f"unknown function {e.func!r}")
    left = evaluate(e.left, env)
    right = evaluate(e.right, env)
    if e.op == "+":
        return left + right
    if e.op == "-":
        return left - right
    if e.op == "*":
        return left * right
    if right == 0:
        raise ExprEvalError(f"division by zero in {print_expr(e)!r}")
    return left / right


def identifiers(e: Expression) -> set[str]:
    if isinstance(e, Lit):
        return set()
    if isinstance(e, Ident):
        return {e.name}
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= identifiers(a)
        return out
    return identifiers(e.left) | identifiers(e.right)


# ---------------------------------------------------------------------------
# Range resolution
# ---------------------------------------------------------------------------


def resolve_ranges(
    specs: "list",
    facts: "object",
    config: Optional[Mapping[str, int]] = None,
) -> dict[str, tuple[int, int]]:
    """Resolve every parameter's range to concrete integer bounds.

    Dependencies between parameters are resolved in topological order.  For
    an identifier appearing in a bound expression, lookup order is: the
    current configuration (if it sets that parameter), then the referenced
    parameter's own resolved bound, then the system facts.  An unset
    dependency contributes its resolved maximum inside a max bound and its
    resolved minimum inside a min bound, so bounds stay conservative both
    ways.

    Bounds are rounded inward (min up, max down) when an expression lands
    between integers.  Parameters whose range is a non-numeric choice list
    are left out of the result.

    Raises ``UnknownIdentifierError`` for a dangling identifier and
    ``DependencyCycleError`` (carrying the cycle) for circular dependencies.
    """
    from .core import Choices, ExprBounds, StaticInt

    config = dict(config or {})
    by_name = {s.name: s for s in specs}
    if len(by_name) != len(specs):
        raise RangeResolutionError("duplicate parameter names")
    fact_env = facts.as_env()

    deps: dict[str, set[str]] = {}
    for s in specs:
        if not isinstance(s.range, ExprBounds):
            deps[s.name] = set()
            continue
        wanted = set(s.range.depends_on)
        for ident in sorted(wanted):
            if ident not in by_name and ident not in fact_env and ident not in config:
                raise UnknownIdentifierError(ident, f"range of {s.name!r}")
        deps[s.name] = {i for i in wanted if i in by_name}

    order = _topo_order(deps)

    resolved: dict[str, tuple[int, int]] = {}
    for name in order:
        r = by_name[name].range
        if isinstance(r, StaticInt):
            resolved[name] = (r.min, r.max)
        elif isinstance(r, Choices):
            if all(isinstance(v, int) for v in r.values):
                resolved[name] = (min(r.values), max(r.values))
            # non-numeric choice lists have no integer bounds
        else:
            lo = _eval_bound(r.min_expr, name, config, resolved, fact_env, side=0)
            hi = _eval_bound(r.max_expr, name, config, resolved, fact_env, side=1)
            lo_i, hi_i = math.ceil(lo), math.floor(hi)
            if lo_i > hi_i:
                raise RangeResolutionError(
                    f"range of {name!r} is empty after resolution: [{lo_i}, {hi_i}]"
                )
            resolved[name] = (lo_i, hi_i)
    return resolved


def _eval_bound(
    e: Expression,
    name: str,
    config: Mapping[str, int],
    resolved: Mapping[str, tuple[int, int]],
    fact_env: Mapping[str, float],
    side: int,
) -> Fraction:
    env: dict[str, Union[int, float, Fraction]] = {}
    for ident in identifiers(e):
        if ident in config:
            env[ident] = config[ident]
        elif ident in resolved:
            env[ident] = resolved[ident][side]
        elif ident in fact_env:
            env[ident] = fact_env[ident]
        else:
            raise UnknownIdentifierError(ident, f"range of {name!r}")
    return evaluate(e, env)


def _topo_order(deps: Mapping[str, set[str]]) -> list[str]:
    """Kahn's algorithm; on failure, report one concrete cycle."""
    remaining = {k: set(v) for k, v in deps.items()}
    order: list[str] = []
    while remaining:
        ready = sorted(k for k, v in remaining.items() if not v)
        if not ready:
            raise DependencyCycleError(_find_cycle(remaining))
        for node in ready:
            order.append(node)
            del remaining[node]
        for pending in remaining.values():
            pending.difference_update(ready)
    return order


def _find_cycle(deps: Mapping[str, set[str]]) -> list[str]:
    start = sorted(deps)[0]
    seen: list[str] = []
    node = start
    while node not in seen:
        seen.append(node)
        node = sorted(d for d in deps[node] if d in deps)[0]
    return seen[seen.index(node) :]
