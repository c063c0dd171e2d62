"""Small arithmetic expression language for drift and diffusion entries.

Expressions are parsed once into a tree and evaluated with numpy, so the same
compiled expression works on scalars and on batches of states.

Grammar::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | power
    power := atom (('^' | '**') unary)?
    atom  := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

FUNCTIONS = {
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "tan": (np.tan, 1),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "min": (np.minimum, None),
    "max": (np.maximum, None),
}

BUILTIN_CONSTANTS = {"pi": math.pi, "e": math.e}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


class ExpressionError(ValueError):
    """Raised for malformed expressions or references to unknown names."""

    def __init__(self, message: str, source: str = "", column: int | None = None):
        self.source = source
        self.column = column
        if column is not None:
            message = f"{message} (column {column})"
        super().__init__(message)


class Node:
    def evaluate(self, env):
        raise NotImplementedError

    def names(self) -> set[str]:
        return set()


@dataclass(frozen=True)
class Num(Node):
    value: float

    def evaluate(self, env):
        return np.float64(self.value)


@dataclass(frozen=True)
class Name(Node):
    name: str

    def evaluate(self, env):
        return env[self.name]

    def names(self):
        return {self.name}


@dataclass(frozen=True)
class Unary(Node):
    operand: Node

    def evaluate(self, env):
        return -self.operand.evaluate(env)

    def names(self):
        return self.operand.names()


@dataclass(frozen=True)
class Binary(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            return a / b
        return np.power(a, b)

    def names(self):
        return self.left.names() | self.right.names()


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple

    def evaluate(self, env):
        fn, _ = FUNCTIONS[self.func]
        values = [arg.evaluate(env) for arg in self.args]
        out = values[0]
        if len(values) == 1 and self.func not in ("min", "max"):
            return fn(out)
        for v in values[1:]:
            out = fn(out, v)
        return out

    def names(self):
        out: set[str] = set()
        for arg in self.args:
            out |= arg.names()
        return out


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            col = pos + 1 + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionError(
                f"syntax error: unexpected character {source[col - 1]!r}", source, col
            )
        kind = m.lastgroup
        start = m.start(kind) + 1
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source) + 1))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, col = self.take()
        if text != value:
            found = "end of input" if kind == "end" else repr(text)
            raise ExpressionError(f"syntax error: expected {value!r}, found {found}", self.source, col)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, col = self.peek()
        if kind != "end":
            raise ExpressionError(f"syntax error: unexpected {text!r}", self.source, col)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Unary(self.unary())
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text in ("^", "**"):
            self.take()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, col = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {text}", self.source, col)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = FUNCTIONS[text][1]
                if arity is not None and len(args) != arity:
                    raise ExpressionError(
                        f"{text} takes {arity} argument(s), got {len(args)}", self.source, col
                    )
                if arity is None and len(args) < 2:
                    raise ExpressionError(f"{text} needs at least 2 arguments", self.source, col)
                return Call(text, tuple(args))
            return Name(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExpressionError(f"syntax error: unexpected {found}", self.source, col)


class Expression:
    """A parsed expression bound to a fixed set of allowed names.

    Constants are substituted at compile time; the remaining free names must be
    supplied to :meth:`evaluate`.
    """

    def __init__(self, source: str, allowed: set[str] | frozenset[str] = frozenset(),
                 constants: Mapping[str, float] | None = None):
        self.source = str(source)
        consts = dict(BUILTIN_CONSTANTS)
        consts.update(constants or {})
        tree = _Parser(self.source).parse()
        for name in sorted(tree.names()):
            if name not in allowed and name not in consts:
                col = _find_name(self.source, name)
                raise ExpressionError(f"unknown identifier {name}", self.source, col)
        with np.errstate(all="ignore"):
            self.tree = _substitute(tree, consts)
        self.free = frozenset(self.tree.names())

    @property
    def is_constant(self) -> bool:
        return not self.free

    def constant_value(self) -> float:
        if self.free:
            raise ExpressionError(f"expression {self.source!r} is not constant")
        with np.errstate(all="ignore"):
            return float(self.tree.evaluate({}))

    def evaluate(self, env: Mapping[str, object]):
        """Evaluate with numpy semantics: division by zero gives inf/nan rather than raising."""
        with np.errstate(all="ignore"):
            return self.tree.evaluate(env)

    def __repr__(self):
        return f"Expression({self.source!r})"


def _find_name(source: str, name: str) -> int | None:
    m = re.search(rf"(?<![A-Za-z_0-9]){re.escape(name)}(?![A-Za-z_0-9])", source)
    return m.start() + 1 if m else None


def _substitute(node: Node, consts: Mapping[str, float]) -> Node:
    if isinstance(node, Name):
        return Num(float(consts[node.name])) if node.name in consts else node
    if isinstance(node, Unary):
        inner = _substitute(node.operand, consts)
        return Num(-inner.value) if isinstance(inner, Num) else Unary(inner)
    if isinstance(node, Binary):
        left = _substitute(node.left, consts)
        right = _substitute(node.right, consts)
        folded = Binary(node.op, left, right)
        if isinstance(left, Num) and isinstance(right, Num):
            return Num(float(folded.evaluate({})))
        return folded
    if isinstance(node, Call):
        args = tuple(_substitute(a, consts) for a in node.args)
        call = Call(node.func, args)
        if all(isinstance(a, Num) for a in args):
            return Num(float(call.evaluate({})))
        return call
    return node


def split_vector(source: str) -> list[str]:
    """Split ``"[a, b, min(c, d)]"`` into its top-level comma-separated items."""
    text = source.strip()
    if not (text.startswith("[") and text.endswith("]")):
        return [text]
    body = text[1:-1]
    items, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == "," and depth == 0:
            items.append(body[start:i].strip())
            start = i + 1
    items.append(body[start:].strip())
    return [item for item in items if item != ""]
