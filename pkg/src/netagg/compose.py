"""Parsing and evaluation of merge/forget expressions like (N1+N2)-N2."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationOp, SUM
from .errors import ConfigError, ShapeError
from .params import ParamSet

__all__ = ["parse_expression", "normalize", "referenced_names", "evaluate_expression"]

_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_*]*|\+|\-|\(|\))")


@dataclass(frozen=True)
class Node:
    kind: str  # "ident" | "+" | "-"
    name: str | None = None
    left: "Node | None" = None
    right: "Node | None" = None


def _tokenize(expr: str) -> list[str]:
    tokens, pos = [], 0
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m:
            if expr[pos:].strip():
                raise ConfigError(f"cannot parse expression at: {expr[pos:]!r}")
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def parse_expression(expr: str) -> Node:
    """Left-associative +/- over identifiers, with parentheses."""
    tokens = _tokenize(expr)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def parse_term() -> Node:
        nonlocal pos
        tok = peek()
        if tok is None:
            raise ConfigError(f"unexpected end of expression: {expr!r}")
        if tok == "(":
            pos += 1
            node = parse_sum()
            if peek() != ")":
                raise ConfigError(f"missing ')' in expression: {expr!r}")
            pos += 1
            return node
        if tok in ("+", "-", ")"):
            raise ConfigError(f"unexpected {tok!r} in expression: {expr!r}")
        pos += 1
        return Node("ident", name=tok)

    def parse_sum() -> Node:
        nonlocal pos
        node = parse_term()
        while peek() in ("+", "-"):
            op = tokens[pos]
            pos += 1
            node = Node(op, left=node, right=parse_term())
        return node

    root = parse_sum()
    if pos != len(tokens):
        raise ConfigError(f"trailing tokens in expression: {expr!r}")
    return root


def normalize(node: Node) -> str:
    """Canonical fully-parenthesised rendering, stable for provenance."""
    if node.kind == "ident":
        return node.name
    return f"({normalize(node.left)}{node.kind}{normalize(node.right)})"


def referenced_names(node: Node) -> list[str]:
    if node.kind == "ident":
        return [node.name]
    seen = []
    for n in referenced_names(node.left) + referenced_names(node.right):
        if n not in seen:
            seen.append(n)
    return seen


@dataclass
class _Value:
    """Running combination: raw elementwise sums plus operand count,
    so the mean operator stays exact over arbitrary +/- chains."""

    sums: dict[str, np.ndarray]
    count: int


def _leaf(ps: ParamSet) -> _Value:
    return _Value({k: ps[k].astype(np.float32, copy=True) for k in ps.aggregable_keys()}, 1)


def _merge(a: _Value, b: _Value, sign: int) -> _Value:
    if a.sums.keys() != b.sums.keys():
        raise ShapeError("expression operands have different aggregable keys")
    out = {}
    for k in a.sums:
        if a.sums[k].shape != b.sums[k].shape:
            raise ShapeError(f"expression operands disagree on shape of {k!r}")
        out[k] = a.sums[k] + b.sums[k] if sign > 0 else a.sums[k] - b.sums[k]
    count = a.count + sign * b.count
    if count < 1:
        raise ConfigError("expression removes more operands than it combines")
    return _Value(out, count)


def evaluate_expression(node: Node, operands: dict[str, ParamSet], op: AggregationOp = SUM) -> tuple[ParamSet, int]:
    """Evaluate to a ParamSet of aggregable entries; also returns the net
    operand count (needed to materialise the mean operator)."""

    def walk(n: Node) -> _Value:
        if n.kind == "ident":
            if n.name not in operands:
                raise ConfigError(f"unknown operand {n.name!r}; available: {sorted(operands)}")
            return _leaf(operands[n.name])
        return _merge(walk(n.left), walk(n.right), +1 if n.kind == "+" else -1)

    val = walk(node)
    out = ParamSet("aggregate")
    for k, arr in val.sums.items():
        out.add(k, arr / np.float32(val.count) if op.kind == "mean" else arr, aggregable=True)
    return out, val.count
