"""Recursive-descent parser for closed-form sources and boundary data.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')' | '|' expr '|'

Names: ``x, y, z`` (coordinates), ``r`` (distance to the origin) and ``pi``.
Functions: ``sin, cos, exp, sqrt, abs, log``.
"""
from __future__ import annotations

import re

import numpy as np

__all__ = ["ExprError", "Expression", "parse"]

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(\*\*|[-+*/^()|]))")
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs, "log": np.log}
_BINARY = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide, "^": np.power}


class ExprError(ValueError):
    pass


def _tokenize(text):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExprError(f"unexpected character {text[pos:].strip()[:1]!r} at position {pos}")
        num, name, op = m.groups()
        if num is not None:
            out.append(("num", float(num)))
        elif name is not None:
            out.append(("name", name))
        else:
            out.append(("op", "^" if op == "**" else op))
        pos = m.end()
    out.append(("end", None))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        tok = self.take()
        if tok != ("op", op):
            raise ExprError(f"expected {op!r}, got {tok[1]!r}")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ExprError(f"trailing input at {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        if self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            operand = self.unary()
            return operand if op == "+" else ("neg", operand)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if val in _FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("call", val, arg)
            if val == "pi":
                return ("num", np.pi)
            if val in ("x", "y", "z", "r"):
                return ("var", val)
            raise ExprError(f"unknown name {val!r}")
        if (kind, val) == ("op", "("):
            node = self.expr()
            self.expect(")")
            return node
        if (kind, val) == ("op", "|"):
            node = self.expr()
            self.expect("|")
            return ("call", "abs", node)
        raise ExprError("unexpected end of expression" if kind == "end" else f"unexpected {val!r}")


def _eval(node, env):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -_eval(node[1], env)
    if kind == "call":
        return _FUNCS[node[1]](_eval(node[2], env))
    return _BINARY[node[1]](_eval(node[2], env), _eval(node[3], env))


def _names(node):
    if node[0] == "var":
        return {node[1]}
    return set().union(*(_names(c) for c in node[1:] if isinstance(c, tuple)))


class Expression:
    """Compiled expression; call with points of shape ``(k, n)``."""

    def __init__(self, text):
        self.text = text
        self.tree = _Parser(text).parse()
        self.variables = _names(self.tree)

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[-1]
        if "z" in self.variables and n < 3:
            raise ExprError("expression uses z on a 2-D domain")
        env = {"x": pts[..., 0], "y": pts[..., 1], "r": np.linalg.norm(pts, axis=-1)}
        if n > 2:
            env["z"] = pts[..., 2]
        with np.errstate(all="ignore"):
            out = _eval(self.tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1]).copy()

    def __repr__(self):
        return f"Expression({self.text!r})"


def parse(text):
    return Expression(text)
