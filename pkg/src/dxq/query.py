"""Query-subset parser and evaluator.

The supported language is a small, closed subset:

    let $v := Expr return Expr
    .                       the context item
    ./a/b   or   a/b        child steps by element name
    $v                      variable reference
    sum(Expr)               decimal sum over the selected items
    <name a="v">...</name>  direct element constructor; content mixes
                            literal text, nested elements and {Expr}

Values are sequences of items (elements or arbitrary-precision decimals).
Anything outside the subset fails to parse; parse and evaluation failures
both raise :class:`QueryError`, whose message travels back to the sender
in the body of an ERROR 200.

Integrators wanting a full query processor can swap in any callable with
the :func:`run_query` signature (query text, context tree) -> bytes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Union

from .xmltree import ELEMENT, TEXT, XmlNode, element, serialize_xml, text

Value = list[Union[XmlNode, Decimal]]

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9._-]*")
_ENTITIES = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}


class QueryError(Exception):
    """Query parse or evaluation failure."""


@dataclass
class Let:
    var: str
    value: "Expr"
    body: "Expr"


@dataclass
class VarRef:
    name: str


@dataclass
class Path:
    steps: list[str]  # empty means "."


@dataclass
class SumCall:
    arg: "Expr"


@dataclass
class Interp:
    expr: "Expr"


@dataclass
class Constructor:
    name: str
    attributes: list[tuple[str, str]]
    content: list[Union[str, "Constructor", Interp]]


Expr = Union[Let, VarRef, Path, SumCall, Constructor]


class _Scanner:
    def __init__(self, source: str):
        self.source = source
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.source) and self.source[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self, token: str) -> bool:
        return self.source.startswith(token, self.pos)

    def take(self, token: str) -> bool:
        if self.peek(token):
            self.pos += len(token)
            return True
        return False

    def expect(self, token: str):
        if not self.take(token):
            raise QueryError(f"expected {token!r} at position {self.pos}")

    def name(self) -> str:
        m = _NAME_RE.match(self.source, self.pos)
        if m is None:
            raise QueryError(f"expected a name at position {self.pos}")
        self.pos = m.end()
        return m.group(0)

    def at_end(self) -> bool:
        return self.pos >= len(self.source)


def parse_query(source: str) -> Expr:
    """Parse a query of the subset; rejects anything outside it."""
    scanner = _Scanner(source)
    expr = _parse_expr(scanner)
    scanner.skip_ws()
    if not scanner.at_end():
        raise QueryError(f"unexpected input at position {scanner.pos}")
    _check_bound(expr, set())
    return expr


def _parse_expr(s: _Scanner) -> Expr:
    s.skip_ws()
    if s.at_end():
        raise QueryError("unexpected end of query")
    if s.peek("let") and _is_keyword(s, "let"):
        return _parse_let(s)
    if s.peek("$"):
        s.take("$")
        return VarRef(s.name())
    if s.peek("<"):
        return _parse_constructor(s)
    if s.peek("sum") and _is_call(s, "sum"):
        s.take("sum")
        s.skip_ws()
        s.expect("(")
        arg = _parse_expr(s)
        s.skip_ws()
        s.expect(")")
        return SumCall(arg)
    if s.peek("."):
        s.take(".")
        steps: list[str] = []
        while s.take("/"):
            steps.append(s.name())
        return Path(steps)
    first = s.name()
    if first in ("let", "return"):
        raise QueryError(f"{first!r} is a reserved word")
    steps = [first]
    while s.take("/"):
        steps.append(s.name())
    return Path(steps)


def _is_keyword(s: _Scanner, word: str) -> bool:
    # True when the word at the cursor is not just a prefix of a longer name.
    after = s.pos + len(word)
    return after >= len(s.source) or not re.match(r"[A-Za-z0-9._-]", s.source[after])


def _is_call(s: _Scanner, word: str) -> bool:
    m = re.compile(re.escape(word) + r"[ \t\r\n]*\(").match(s.source, s.pos)
    return m is not None


def _parse_let(s: _Scanner) -> Let:
    s.expect("let")
    s.skip_ws()
    s.expect("$")
    var = s.name()
    s.skip_ws()
    s.expect(":=")
    value = _parse_expr(s)
    s.skip_ws()
    if not (s.peek("return") and _is_keyword(s, "return")):
        raise QueryError(f"expected 'return' at position {s.pos}")
    s.take("return")
    body = _parse_expr(s)
    return Let(var, value, body)


def _parse_constructor(s: _Scanner) -> Constructor:
    s.expect("<")
    name = s.name()
    attributes: list[tuple[str, str]] = []
    while True:
        s.skip_ws()
        if s.take("/>"):
            return Constructor(name, attributes, [])
        if s.take(">"):
            break
        attr = s.name()
        s.skip_ws()
        s.expect("=")
        s.skip_ws()
        quote = '"' if s.peek('"') else "'" if s.peek("'") else None
        if quote is None:
            raise QueryError(f"expected a quoted attribute value at position {s.pos}")
        s.take(quote)
        end = s.source.find(quote, s.pos)
        if end < 0:
            raise QueryError("unterminated attribute value")
        attributes.append((attr, _unescape(s.source[s.pos:end])))
        s.pos = end + 1

    content: list[Union[str, Constructor, Interp]] = []
    while True:
        if s.at_end():
            raise QueryError(f"unterminated element constructor <{name}>")
        if s.take("</"):
            closing = s.name()
            if closing != name:
                raise QueryError(f"mismatched end tag </{closing}> for <{name}>")
            s.skip_ws()
            s.expect(">")
            return Constructor(name, attributes, content)
        if s.peek("<"):
            content.append(_parse_constructor(s))
            continue
        if s.take("{"):
            content.append(Interp(_parse_expr(s)))
            s.skip_ws()
            s.expect("}")
            continue
        start = s.pos
        while not s.at_end() and s.source[s.pos] not in "<{":
            s.pos += 1
        literal = _unescape(s.source[start:s.pos])
        if literal.strip(" \t\r\n"):
            content.append(literal)


def _unescape(value: str) -> str:
    if "&" not in value:
        return value
    out: list[str] = []
    pos = 0
    while pos < len(value):
        ch = value[pos]
        if ch != "&":
            out.append(ch)
            pos += 1
            continue
        end = value.find(";", pos + 1)
        entity = value[pos + 1:end] if end > 0 else ""
        if end < 0 or entity not in _ENTITIES:
            raise QueryError(f"unsupported entity reference at {value[pos:pos + 8]!r}")
        out.append(_ENTITIES[entity])
        pos = end + 1
    return "".join(out)


def _check_bound(expr: Expr, scope: set[str]) -> None:
    if isinstance(expr, Let):
        _check_bound(expr.value, scope)
        _check_bound(expr.body, scope | {expr.var})
    elif isinstance(expr, VarRef):
        if expr.name not in scope:
            raise QueryError(f"unbound variable ${expr.name}")
    elif isinstance(expr, SumCall):
        _check_bound(expr.arg, scope)
    elif isinstance(expr, Constructor):
        for piece in expr.content:
            if isinstance(piece, Interp):
                _check_bound(piece.expr, scope)
            elif isinstance(piece, Constructor):
                _check_bound(piece, scope)


def evaluate(expr: Expr, context: XmlNode) -> Value:
    """Evaluate against a context element (typically the document root)."""
    return _eval(expr, context, {})


def _eval(expr: Expr, context: XmlNode, env: dict[str, Value]) -> Value:
    if isinstance(expr, Let):
        bound = _eval(expr.value, context, env)
        return _eval(expr.body, context, {**env, expr.var: bound})
    if isinstance(expr, VarRef):
        if expr.name not in env:
            raise QueryError(f"unbound variable ${expr.name}")
        return env[expr.name]
    if isinstance(expr, Path):
        items: Value = [context]
        for step in expr.steps:
            items = [
                child
                for item in items
                if isinstance(item, XmlNode) and item.kind == ELEMENT
                for child in item.children
                if child.kind == ELEMENT and child.name == step
            ]
        return items
    if isinstance(expr, SumCall):
        total = Decimal(0)
        for item in _eval(expr.arg, context, env):
            total += _to_number(item)
        return [total]
    if isinstance(expr, Constructor):
        return [_build(expr, context, env)]
    raise QueryError(f"unknown expression node: {expr!r}")


def _to_number(item: XmlNode | Decimal) -> Decimal:
    if isinstance(item, Decimal):
        return item
    try:
        return Decimal(item.text_content())
    except InvalidOperation:
        raise QueryError(
            f"cannot convert {item.text_content()!r} to a number"
        ) from None


def _build(ctor: Constructor, context: XmlNode, env: dict[str, Value]) -> XmlNode:
    children: list[XmlNode] = []

    def add_text(value: str):
        if children and children[-1].kind == TEXT:
            children[-1] = text(children[-1].text + value)
        else:
            children.append(text(value))

    for piece in ctor.content:
        if isinstance(piece, str):
            add_text(piece)
        elif isinstance(piece, Constructor):
            children.append(_build(piece, context, env))
        else:
            for item in _eval(piece.expr, context, env):
                if isinstance(item, Decimal):
                    add_text(format_number(item))
                else:
                    children.append(item.copy())
    return element(ctor.name, list(ctor.attributes), children)


def format_number(value: Decimal) -> str:
    """Minimal decimal form: no exponent, no trailing zeros, integers bare."""
    s = format(value, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    if s in ("", "-0", "-"):
        return "0"
    return s


def serialize_value(value: Value) -> bytes:
    """Concatenated item serializations; numbers in minimal decimal form."""
    parts = []
    for item in value:
        if isinstance(item, Decimal):
            parts.append(format_number(item).encode("utf-8"))
        else:
            parts.append(serialize_xml(item))
    return b"".join(parts)


def run_query(source: str, context: XmlNode) -> bytes:
    """Parse and evaluate in one step, returning the serialized value."""
    return serialize_value(evaluate(parse_query(source), context))
