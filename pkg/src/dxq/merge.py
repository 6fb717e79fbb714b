"""Result merging: concatenate, remove-duplicates, user-defined.

``concatenate`` frames the provider results in a ``<result>`` element.
``remove-duplicates`` merges structurally down to a cut-off depth (the
root is level 0) and deduplicates the subtrees rooted at that depth by
canonical serialization, keeping first occurrences.  ``user-defined``
evaluates a caller-supplied query against a synthetic context item that
lists every provider result:

    <context-item>
      <result>
        <xdp><name>PROVIDER-NAME</name></xdp>
        <xqres>PROVIDER-RESULT</xqres>
      </result>
      ...
    </context-item>
"""

from __future__ import annotations

from dataclasses import dataclass

from .query import Expr, Value, evaluate, parse_query
from .xmltree import ELEMENT, XmlNode, element, serialize_xml, text

ALGORITHMS = ("concatenate", "remove-duplicates", "user-defined")


class MergeError(Exception):
    """Inputs that the selected merge algorithm cannot join."""


@dataclass
class XdpResult:
    """One provider's contribution: its name and the parsed result body."""

    source_name: str
    body: XmlNode


def list_algorithms() -> list[str]:
    """The fixed algorithm set of this implementation."""
    return list(ALGORITHMS)


def merge_concatenate(results: list[XdpResult]) -> XmlNode:
    """Result roots stuck together under a ``<result>`` element, in order."""
    return element("result", children=[r.body.copy() for r in results])


def merge_remove_duplicates(results: list[XdpResult], depth: int) -> XmlNode:
    """Structural merge above ``depth``, ordered dedup at and below it.

    Levels 0..depth-1 unify elements that agree on (name, attributes),
    first-seen order kept.  The children at level ``depth`` are
    concatenated under their unified parent with exact duplicates
    (identical canonical serialization) dropped, first occurrence kept.
    """
    if depth < 1:
        raise MergeError(f"remove-duplicates requires a depth of at least 1, got {depth}")
    if not results:
        raise MergeError("remove-duplicates requires at least one result")
    names = {r.body.name for r in results}
    if len(names) != 1:
        raise MergeError(f"result documents have differing root elements: {sorted(names)}")
    wrappers = [element("roots", children=[r.body]) for r in results]
    merged = _merge_level(wrappers, 0, depth)
    if len(merged) != 1:
        raise MergeError("result documents have differing root attributes")
    return merged[0]


def _merge_level(parents: list[XmlNode], level: int, depth: int) -> list[XmlNode]:
    if level >= depth:
        seen: set[bytes] = set()
        out = []
        for parent in parents:
            for child in parent.children:
                key = serialize_xml(child)
                if key not in seen:
                    seen.add(key)
                    out.append(child.copy())
        return out

    order: list[tuple] = []
    groups: dict[tuple, list[XmlNode]] = {}
    for parent in parents:
        for child in parent.children:
            if child.kind == ELEMENT:
                key = (ELEMENT, child.name, tuple(child.attributes))
            else:
                key = ("text", child.text)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(child)

    out = []
    for key in order:
        if key[0] == ELEMENT:
            group = groups[key]
            node = element(group[0].name, list(group[0].attributes))
            node.children = _merge_level(group, level + 1, depth)
            out.append(node)
        else:
            out.append(text(key[1]))
    return out


def build_context_item(results: list[XdpResult]) -> XmlNode:
    """The context item a user-defined merge query runs against."""
    entries = []
    for r in results:
        entries.append(element("result", children=[
            element("xdp", children=[
                element("name", children=[text(r.source_name)] if r.source_name else []),
            ]),
            element("xqres", children=[r.body.copy()]),
        ]))
    return element("context-item", children=entries)


def merge_user_defined(results: list[XdpResult], query: Expr | str) -> Value:
    """Evaluate the merge query against the context item.

    Returns the evaluated value; serialize it to obtain the merged-result
    body.  Query failures raise :class:`dxq.query.QueryError`.
    """
    if isinstance(query, str):
        query = parse_query(query)
    return evaluate(query, build_context_item(results))
