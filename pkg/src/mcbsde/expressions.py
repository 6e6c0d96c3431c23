"""Arithmetic expression language for drivers and payoffs.

Scenario files carry drivers and payoffs as strings so that runs stay data,
reproducible without shipping code. The grammar is deliberately plain:

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := power
    power  := unary ('^' unary)?
    unary  := '-'? atom
    atom   := number | 't' | 'y' | 'z'IDX | 's' | ident '(' args ')'
            | '(' expr ')'

Exponentiation does not chain ("2^3^4" is a syntax error, parenthesize) and
unary minus binds tighter than '^'. Free variables are the time t, the value
y, the representation components z1..zN (1-based), and the state index s
(0-based, matching array indexing everywhere else in the package). Any other
bare identifier is a named constant that must be bound at evaluation time.

Functions: sqrt, abs, exp, log, pos (positive part), each unary; max and min,
each binary. Evaluation is numpy-vectorized and total on finite inputs:
sqrt of a negative, log of a nonpositive, division by zero, and non-finite
powers raise EvaluationError instead of propagating nan.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

import numpy as np

from .errors import (
    ArityError,
    EvaluationError,
    ExpressionSyntaxError,
    LexError,
    UnknownIdentifier,
)

__all__ = [
    "Expression",
    "parse_expression",
]

_FUNCTIONS = {"sqrt": 1, "abs": 1, "exp": 1, "log": 1, "pos": 1, "max": 2, "min": 2}
_VARIABLES = ("t", "y", "s")

_TOKEN_RE = re.compile(
    r"""(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+)
      |(?P<name>[A-Za-z_][A-Za-z_0-9]*)
      |(?P<punct>[-+*/^(),])
      |(?P<space>\s+)""",
    re.VERBOSE,
)

Node = Union["Num", "Var", "ZVar", "Name", "Neg", "BinOp", "Call"]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "t", "y" or "s"


@dataclass(frozen=True)
class ZVar:
    index: int  # 1-based


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: Node


@dataclass(frozen=True)
class BinOp:
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


# precedence for minimal-paren rendering; atoms sit above everything
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
_NEG_PREC = 4
_ATOM_PREC = 5


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def _render(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, ZVar):
        return f"z{node.index}"
    if isinstance(node, Name):
        return node.name
    if isinstance(node, Call):
        return node.fn + "(" + ", ".join(_render(a) for a in node.args) + ")"
    if isinstance(node, Neg):
        inner = _render(node.arg)
        if _prec(node.arg) < _ATOM_PREC:
            inner = "(" + inner + ")"
        return "-" + inner
    left, right = _render(node.left), _render(node.right)
    mine = _PREC[node.op]
    # left-associative chains keep the left child bare at equal precedence;
    # '^' does not associate at all, so equal precedence needs parens on
    # either side
    if _prec(node.left) < mine or (node.op == "^" and _prec(node.left) == mine):
        left = "(" + left + ")"
    if _prec(node.right) <= mine:
        right = "(" + right + ")"
    if node.op == "^":
        return f"{left}^{right}"
    return f"{left} {node.op} {right}"


def _walk(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.arg)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _walk(a)


def _eval(node: Node, env: dict):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, ZVar):
        z = env["z"]
        if z is None:
            raise EvaluationError(f"expression uses z{node.index} but no z was supplied")
        z = np.asarray(z, dtype=float)
        if node.index > z.shape[-1]:
            raise EvaluationError(
                f"z{node.index} out of range: z has {z.shape[-1]} component(s)"
            )
        return z[..., node.index - 1]
    if isinstance(node, Name):
        try:
            return float(env["constants"][node.name])
        except KeyError:
            raise UnknownIdentifier(f"unbound constant '{node.name}'") from None
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        if node.fn == "sqrt":
            if np.any(np.asarray(args[0]) < 0.0):
                raise EvaluationError("sqrt of negative argument")
            return np.sqrt(args[0])
        if node.fn == "log":
            if np.any(np.asarray(args[0]) <= 0.0):
                raise EvaluationError("log of nonpositive argument")
            return np.log(args[0])
        if node.fn == "exp":
            with np.errstate(over="ignore"):
                out = np.exp(args[0])
            if np.any(~np.isfinite(out)):
                raise EvaluationError("overflow in exp")
            return out
        if node.fn == "abs":
            return np.abs(args[0])
        if node.fn == "pos":
            return np.maximum(args[0], 0.0)
        if node.fn == "max":
            return np.maximum(args[0], args[1])
        return np.minimum(args[0], args[1])
    a, b = _eval(node.left, env), _eval(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        if np.any(np.asarray(b) == 0.0):
            raise EvaluationError("division by zero")
        return a / b
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.power(a, b)
    if np.any(~np.isfinite(out)):
        raise EvaluationError("non-finite result in power")
    return out


@dataclass(frozen=True)
class Expression:
    """Parsed expression; ``text`` keeps the source spelling for echoing."""

    root: Node
    text: str = field(compare=False)

    def __str__(self) -> str:
        return _render(self.root)

    @property
    def constants(self) -> frozenset:
        """Names of free constants that must be bound at evaluation."""
        return frozenset(n.name for n in _walk(self.root) if isinstance(n, Name))

    @property
    def variables(self) -> frozenset:
        """Which of t, y, z, s the expression actually reads."""
        out = set()
        for n in _walk(self.root):
            if isinstance(n, Var):
                out.add(n.name)
            elif isinstance(n, ZVar):
                out.add("z")
        return frozenset(out)

    @property
    def max_z_index(self) -> int:
        return max(
            (n.index for n in _walk(self.root) if isinstance(n, ZVar)), default=0
        )

    def evaluate(self, *, t=0.0, y=0.0, z=None, s=0, constants: Mapping | None = None):
        """Evaluate with numpy broadcasting across t, y, z, s.

        z indexes its last axis, so a (N,) vector serves scalar points and a
        (B, N) batch serves B points at once. Raises EvaluationError on any
        guarded operation (see module docstring) and on non-finite results,
        UnknownIdentifier on an unbound constant.
        """
        env = {"t": t, "y": y, "s": s, "z": z, "constants": constants or {}}
        out = np.asarray(_eval(self.root, env), dtype=float)
        if np.any(~np.isfinite(out)):
            raise EvaluationError("non-finite result")
        return out if out.ndim else float(out)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unexpected character {text[pos]!r} at position {pos}")
        if m.lastgroup != "space":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        if tok is None:
            raise ExpressionSyntaxError(
                f"unexpected end of input at position {len(self.text)}"
            )
        self.i += 1
        return tok

    def expect(self, text):
        tok = self.take()
        if tok[1] != text:
            raise ExpressionSyntaxError(
                f"expected {text!r} but found {tok[1]!r} at position {tok[2]}"
            )

    def at_punct(self, text):
        tok = self.peek()
        return tok is not None and tok[0] == "punct" and tok[1] == text

    def expr(self) -> Node:
        node = self.term()
        while self.at_punct("+") or self.at_punct("-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.power()
        while self.at_punct("*") or self.at_punct("/"):
            op = self.take()[1]
            node = BinOp(op, node, self.power())
        return node

    def power(self) -> Node:
        node = self.unary()
        if self.at_punct("^"):
            self.take()
            node = BinOp("^", node, self.unary())
        return node

    def unary(self) -> Node:
        if self.at_punct("-"):
            self.take()
            return Neg(self.atom())
        return self.atom()

    def atom(self) -> Node:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            return self.name_atom(text, pos)
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionSyntaxError(f"unexpected {text!r} at position {pos}")

    def name_atom(self, text, pos) -> Node:
        if self.at_punct("("):
            if text not in _FUNCTIONS:
                raise UnknownIdentifier(
                    f"unknown function {text!r} at position {pos}"
                )
            self.take()
            args = []
            if not self.at_punct(")"):
                args.append(self.expr())
                while self.at_punct(","):
                    self.take()
                    args.append(self.expr())
            self.expect(")")
            want = _FUNCTIONS[text]
            if len(args) != want:
                raise ArityError(
                    f"{text} takes {want} argument(s), got {len(args)}"
                    f" at position {pos}"
                )
            return Call(text, tuple(args))
        if text in _FUNCTIONS:
            raise ExpressionSyntaxError(
                f"{text!r} is a function and needs arguments at position {pos}"
            )
        if text in _VARIABLES:
            return Var(text)
        m = re.fullmatch(r"z(\d+)", text)
        if m:
            idx = int(m.group(1))
            if idx < 1:
                raise ExpressionSyntaxError(
                    f"z components are numbered from 1 at position {pos}"
                )
            return ZVar(idx)
        return Name(text)


def parse_expression(text: str) -> Expression:
    """Parse ``text`` per the module grammar.

    Raises LexError on a bad character, ExpressionSyntaxError on malformed
    structure, UnknownIdentifier for a call to an undeclared function and
    ArityError on a wrong argument count, all position-annotated.
    """
    parser = _Parser(_tokenize(text), text)
    root = parser.expr()
    tok = parser.peek()
    if tok is not None:
        raise ExpressionSyntaxError(f"unexpected {tok[1]!r} at position {tok[2]}")
    return Expression(root=root, text=text)
