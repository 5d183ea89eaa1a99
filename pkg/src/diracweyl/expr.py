"""Small arithmetic grammar for inline coefficient functions.

Accepted syntax::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom (('^' | '**') unary)?
    atom   := NUMBER | 'x' | 'pi' | 'e' | FUNC '(' expr ')' | '(' expr ')'
    FUNC   := sin | cos | exp | log

Exponentiation is right associative and binds tighter than unary minus,
so ``-x^2`` is ``-(x^2)``.  Expressions compile to numpy-vectorised
callables of ``x``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log}
CONSTANTS = {"pi": math.pi, "e": math.e}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>\*\*|[-+*/^()]))"
)


@dataclass(frozen=True)
class Token:
    kind: str  # 'num', 'name', 'op', 'end'
    text: str
    pos: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            raise ConfigError(f"unexpected character {source[pos]!r} at column {pos + 1} in {source!r}")
        kind = m.lastgroup
        tokens.append(Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(Token("end", "", n))
    return tokens


class Expression:
    """A compiled expression; call it with a float or an array of abscissae."""

    def __init__(self, source: str):
        self.source = source
        self._tokens = tokenize(source)
        self._i = 0
        node = self._expr()
        if self._peek().kind != "end":
            tok = self._peek()
            raise ConfigError(f"trailing input {tok.text!r} at column {tok.pos + 1} in {source!r}")
        self._node = node
        del self._tokens

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        xa = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            out = np.broadcast_to(self._node(xa), xa.shape).astype(float)
        return float(out) if scalar else out

    def __repr__(self):
        return f"Expression({self.source!r})"

    # recursive descent ---------------------------------------------------

    def _peek(self) -> Token:
        return self._tokens[self._i]

    def _take(self) -> Token:
        tok = self._tokens[self._i]
        self._i += 1
        return tok

    def _expect(self, text):
        tok = self._take()
        if tok.text != text:
            raise ConfigError(f"expected {text!r} at column {tok.pos + 1} in {self.source!r}, got {tok.text or 'end of input'!r}")

    def _expr(self):
        left = self._term()
        while self._peek().text in ("+", "-"):
            op = self._take().text
            right = self._term()
            left = _binary(op, left, right)
        return left

    def _term(self):
        left = self._unary()
        while self._peek().text in ("*", "/"):
            op = self._take().text
            right = self._unary()
            left = _binary(op, left, right)
        return left

    def _unary(self):
        if self._peek().text in ("+", "-"):
            op = self._take().text
            operand = self._unary()
            return operand if op == "+" else (lambda x, f=operand: -f(x))
        return self._power()

    def _power(self):
        base = self._atom()
        if self._peek().text in ("^", "**"):
            self._take()
            exponent = self._unary()
            return _binary("^", base, exponent)
        return base

    def _atom(self):
        tok = self._take()
        if tok.kind == "num":
            value = float(tok.text)
            return lambda x, v=value: v
        if tok.kind == "name":
            if tok.text == "x":
                return lambda x: x
            if tok.text in CONSTANTS:
                value = CONSTANTS[tok.text]
                return lambda x, v=value: v
            if tok.text in FUNCTIONS:
                fn = FUNCTIONS[tok.text]
                self._expect("(")
                arg = self._expr()
                self._expect(")")
                return lambda x, f=fn, g=arg: f(g(x))
            raise ConfigError(f"unknown name {tok.text!r} at column {tok.pos + 1} in {self.source!r}")
        if tok.text == "(":
            inner = self._expr()
            self._expect(")")
            return inner
        raise ConfigError(f"unexpected {tok.text or 'end of input'!r} at column {tok.pos + 1} in {self.source!r}")


def _binary(op, f, g):
    if op == "+":
        return lambda x: f(x) + g(x)
    if op == "-":
        return lambda x: f(x) - g(x)
    if op == "*":
        return lambda x: f(x) * g(x)
    if op == "/":
        return lambda x: f(x) / g(x)
    return lambda x: np.power(f(x), g(x))


def parse(source: str) -> Expression:
    return Expression(source)
