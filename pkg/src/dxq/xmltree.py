"""XML tree model with canonical serialization.

Documents, query results and merge context items are all plain trees of
:class:`XmlNode`.  Parsing canonicalizes: whitespace-only text between
elements is dropped, and document-type declarations, comments, processing
instructions and CDATA sections are rejected.  Serialization emits no
insignificant whitespace, keeps attributes in source order, self-closes
empty elements (``<e/>``) and escapes ``&``, ``<`` and ``>`` in text.

Nodes are treated as immutable once built; copy before mutating.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from xml.parsers import expat

ELEMENT = "element"
TEXT = "text"


class XmlError(Exception):
    """Malformed or unsupported XML input."""


@dataclass
class XmlNode:
    kind: str
    name: str = ""
    attributes: list[tuple[str, str]] = field(default_factory=list)
    children: list["XmlNode"] = field(default_factory=list)
    text: str = ""

    def text_content(self) -> str:
        """Concatenated text of this node and all descendants."""
        if self.kind == TEXT:
            return self.text
        return "".join(child.text_content() for child in self.children)

    def copy(self) -> "XmlNode":
        return copy.deepcopy(self)


def element(name: str, attributes: list[tuple[str, str]] | None = None,
            children: list[XmlNode] | None = None) -> XmlNode:
    return XmlNode(ELEMENT, name=name, attributes=list(attributes or []),
                   children=list(children or []))


def text(value: str) -> XmlNode:
    return XmlNode(TEXT, text=value)


def parse_xml(data: bytes | str) -> XmlNode:
    """Parse a single-rooted document into a canonical tree."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = expat.ParserCreate()
    parser.ordered_attributes = True
    parser.buffer_text = True

    root: list[XmlNode] = []
    stack: list[XmlNode] = []
    pending: list[str] = []

    def reject(what):
        def handler(*_args):
            raise XmlError(f"{what} not supported")
        return handler

    def flush_text():
        # Character data may arrive in chunks; judge whitespace-only on
        # the whole run.
        if not pending:
            return
        value = "".join(pending)
        pending.clear()
        if value.strip(" \t\r\n") == "":
            return
        if not stack:
            raise XmlError("text outside the root element")
        stack[-1].children.append(text(value))

    def start(name, attrs):
        flush_text()
        # ordered_attributes mode: flat [name, value, name, value, ...]
        node = element(name, list(zip(attrs[0::2], attrs[1::2])))
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(_name):
        flush_text()
        stack.pop()

    def chars(value):
        pending.append(value)

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    parser.CommentHandler = reject("comments")
    parser.ProcessingInstructionHandler = reject("processing instructions")
    parser.StartDoctypeDeclHandler = reject("document type declarations")
    parser.StartCdataSectionHandler = reject("CDATA sections")

    try:
        parser.Parse(data, True)
    except expat.ExpatError as e:
        raise XmlError(f"malformed XML: {e}") from None
    if not root:
        raise XmlError("empty document")
    return root[0]


def _escape_text(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _escape_attr(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace('"', "&quot;")


def serialize_xml(node: XmlNode) -> bytes:
    """Canonical byte form; parse(serialize(t)) == t for canonical trees."""
    parts: list[str] = []
    _serialize(node, parts)
    return "".join(parts).encode("utf-8")


def _serialize(node: XmlNode, parts: list[str]) -> None:
    if node.kind == TEXT:
        parts.append(_escape_text(node.text))
        return
    attrs = "".join(f' {n}="{_escape_attr(v)}"' for n, v in node.attributes)
    if not node.children:
        parts.append(f"<{node.name}{attrs}/>")
        return
    parts.append(f"<{node.name}{attrs}>")
    for child in node.children:
        _serialize(child, parts)
    parts.append(f"</{node.name}>")
