"""Polynomial expression graphs for flows and observation maps.

Nodes are immutable and may be shared (the graph is a DAG). Supported
operations: ``const``, ``var``, ``add``, ``sub``, ``mul``, ``scale``, ``pow``
(non-negative integer exponent). Graphs can be written in nested prefix
notation, e.g. ``["mul", ["var", 0], ["sub", ["const", 28.0], ["var", 2]]]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Number

from .errors import UnsupportedOperation

OPS = ("const", "var", "add", "sub", "mul", "scale", "pow")


@dataclass(frozen=True, eq=False)
class Expr:
    op: str
    args: tuple

    def __post_init__(self):
        if self.op not in OPS:
            raise UnsupportedOperation(f"unsupported operation {self.op!r}")

    # operator sugar for building graphs in Python
    def __add__(self, other):
        return Expr("add", (self, _wrap(other)))

    def __radd__(self, other):
        return Expr("add", (_wrap(other), self))

    def __sub__(self, other):
        return Expr("sub", (self, _wrap(other)))

    def __rsub__(self, other):
        return Expr("sub", (_wrap(other), self))

    def __mul__(self, other):
        if isinstance(other, Number):
            return Expr("scale", (float(other), self))
        return Expr("mul", (self, other))

    def __rmul__(self, other):
        if isinstance(other, Number):
            return Expr("scale", (float(other), self))
        return Expr("mul", (other, self))

    def __neg__(self):
        return Expr("scale", (-1.0, self))

    def __pow__(self, k):
        return Expr("pow", (self, int(k)))

    def variables(self) -> set:
        seen, out = set(), set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.op == "var":
                out.add(node.args[0])
            for a in node.args:
                if isinstance(a, Expr):
                    stack.append(a)
        return out

    def to_prefix(self):
        if self.op == "const":
            return ["const", self.args[0]]
        if self.op == "var":
            return ["var", self.args[0]]
        if self.op == "scale":
            return ["scale", self.args[0], self.args[1].to_prefix()]
        if self.op == "pow":
            return ["pow", self.args[0].to_prefix(), self.args[1]]
        return [self.op] + [a.to_prefix() for a in self.args]


def const(value: float) -> Expr:
    return Expr("const", (float(value),))


def var(index: int) -> Expr:
    if int(index) != index or index < 0:
        raise UnsupportedOperation(f"variable index must be a non-negative integer, got {index!r}")
    return Expr("var", (int(index),))


def _wrap(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, Number):
        return const(x)
    raise UnsupportedOperation(f"cannot use {type(x).__name__} in an expression")


def parse(node) -> Expr:
    """Build an :class:`Expr` from nested prefix notation (lists / numbers)."""
    if isinstance(node, Expr):
        return node
    if isinstance(node, bool):
        raise UnsupportedOperation("booleans are not valid expression nodes")
    if isinstance(node, Number):
        return const(node)
    if not isinstance(node, (list, tuple)) or not node:
        raise UnsupportedOperation(f"malformed expression node {node!r}")
    op, *rest = node
    if op == "const":
        if len(rest) != 1:
            raise UnsupportedOperation("const takes one value")
        return const(rest[0])
    if op == "var":
        if len(rest) != 1:
            raise UnsupportedOperation("var takes one index")
        return var(rest[0])
    if op in ("add", "mul"):
        if len(rest) < 2:
            raise UnsupportedOperation(f"{op} needs at least two operands")
        return Expr(op, tuple(parse(a) for a in rest))
    if op == "sub":
        if len(rest) != 2:
            raise UnsupportedOperation("sub takes two operands")
        return Expr("sub", (parse(rest[0]), parse(rest[1])))
    if op == "scale":
        if len(rest) != 2 or not isinstance(rest[0], Number):
            raise UnsupportedOperation("scale takes a number and an operand")
        return Expr("scale", (float(rest[0]), parse(rest[1])))
    if op == "pow":
        if len(rest) != 2 or int(rest[1]) != rest[1] or rest[1] < 0:
            raise UnsupportedOperation("pow takes an operand and a non-negative integer exponent")
        return Expr("pow", (parse(rest[0]), int(rest[1])))
    raise UnsupportedOperation(f"unsupported operation {op!r}")


def evaluate(exprs, env):
    """Evaluate a sequence of expressions with ``env[i]`` bound to variable ``i``.

    ``env`` entries can be floats, arrays, or jets; shared sub-graphs are
    evaluated once.
    """
    cache: dict = {}

    def ev(node: Expr):
        key = id(node)
        if key in cache:
            return cache[key]
        op, args = node.op, node.args
        if op == "const":
            out = args[0]
        elif op == "var":
            i = args[0]
            if i >= len(env):
                raise UnsupportedOperation(f"variable {i} out of range for dimension {len(env)}")
            out = env[i]
        elif op == "add":
            out = ev(args[0])
            for a in args[1:]:
                out = out + ev(a)
        elif op == "sub":
            out = ev(args[0]) - ev(args[1])
        elif op == "mul":
            out = ev(args[0])
            for a in args[1:]:
                out = out * ev(a)
        elif op == "scale":
            out = args[0] * ev(args[1])
        elif op == "pow":
            out = ev(args[0]) ** args[1]
        else:  # pragma: no cover - guarded in __post_init__
            raise UnsupportedOperation(op)
        cache[key] = out
        return out

    return [ev(e) for e in exprs]
