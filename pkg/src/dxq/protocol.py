"""DXQP-1.0 message codec.

Wire format (case sensitive, UTF-8):

    DXQP-<major>.<minor> <MSGTYPE>\r\n
    Msg-From: <identifier>\r\n
    Msg-To: <identifier>\r\n
    <Name>: <value>\r\n
    ...
    Content-Length: <n>\r\n       (only when a body follows)
    \r\n
    <body: exactly n bytes>

Header names match ``[A-Za-z-]+``; header values may not contain CR or LF
bytes.  A message carries a body iff the ``Content-Length`` value is a
positive decimal integer; ``Content-Length`` that is absent, empty, zero,
or non-numeric means the message ends at the blank line.

``parse_message`` raises :class:`ParseError` carrying the DXQP error code
the receiver must answer with (100 for syntax/identifier problems, 102 for
a missing ``Msg-From``/``Msg-To``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

CRLF = b"\r\n"

# Error codes with fixed meanings; 9xx is reserved for implementation use.
INVALID_MESSAGE = 100
UNEXPECTED_MESSAGE = 101
MISSING_HEADER = 102
MISSING_CONTENT = 103
QUERY_PROCESSOR_ERROR = 200
UNSUPPORTED_MERGE_ALGORITHM = 300
NO_PROVIDERS_AVAILABLE = 400
INTERNAL_ERROR = 500
# Implementation-defined (9xx) codes used by this implementation.
TRANSPORT_FAILURE = 901
INVALID_RESULT = 902

_VNAME_RE = re.compile(r"^[A-Za-z-]+$")
_ID_LINE_RE = re.compile(r"^DXQP-([0-9])\.([0-9]) (.+)$")
_HEADER_LINE_RE = re.compile(r"^([A-Za-z-]+): +(.*)$")
_IDENTIFIER_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.-]*://[^\s]*$")
_MERGE_ALGORITHM_RE = re.compile(r"^[a-z0-9-]+$")
_RESULT_SOURCES_RE = re.compile(r"^\{[^{}]*\}( \{[^{}]*\})*$")
_XDP_SPEC_RE = re.compile(r"^([^{} ]*)\{([^{}]*)\}$")


class MessageType(Enum):
    """The twelve DXQP-1.0 message types; values are the wire tokens."""

    OK = "OK"
    ERROR = "ERROR"
    XML_QUERY = "XML-QUERY"
    MERGE_ALGORITHM = "MERGE-ALGORITHM"
    XML_QUERY_RESULT = "XML-QUERY-RESULT"
    XML_QUERY_MERGED_RESULT = "XML-QUERY-MERGED-RESULT"
    REGISTER = "REGISTER"
    UNREGISTER = "UNREGISTER"
    ADDTODL = "ADDTODL"
    RMFROMDL = "RMFROMDL"
    INFO_REQUEST = "INFO-REQUEST"
    INFO_REPLY = "INFO-REPLY"


_MSGTYPE_BY_TOKEN = {t.value: t for t in MessageType}

# Canonical placement of the message-specific headers, in grammar order.
# On emit: Msg-From, Msg-To, these (when present), any remaining headers in
# caller order, Content-Length last.
_CANONICAL_SPECIFIC = {
    MessageType.OK: ("Transaction-ID",),
    MessageType.ERROR: ("Error-Code",),
    MessageType.XML_QUERY: ("Transaction-ID", "Merge-Algorithm", "Depth"),
    MessageType.MERGE_ALGORITHM: ("Transaction-ID",),
    MessageType.XML_QUERY_RESULT: ("Transaction-ID",),
    MessageType.XML_QUERY_MERGED_RESULT: ("Transaction-ID", "Result-Sources"),
    MessageType.REGISTER: ("Node-Name",),
    MessageType.UNREGISTER: (),
    MessageType.ADDTODL: (),
    MessageType.RMFROMDL: (),
    MessageType.INFO_REQUEST: ("Request",),
    MessageType.INFO_REPLY: (),
}


class ParseError(Exception):
    """A message failed to parse; ``code`` is the DXQP error to answer with."""

    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else str(code))
        self.code = code
        self.detail = detail


@dataclass
class Message:
    """One DXQP message: type, ordered headers, optional body."""

    msg_type: MessageType
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes | None = None
    version: tuple[int, int] = (1, 0)

    def header(self, name: str) -> str | None:
        """First value of the named header, or None."""
        for n, v in self.headers:
            if n == name:
                return v
        return None

    def header_values(self, name: str) -> list[str]:
        return [v for n, v in self.headers if n == name]

    @property
    def msg_from(self) -> str:
        return self.header("Msg-From") or ""

    @property
    def msg_to(self) -> str:
        return self.header("Msg-To") or ""

    @property
    def transaction_id(self) -> str | None:
        return self.header("Transaction-ID")

    def error_code(self) -> int | None:
        """Error-Code as an int if present and three digits, else None."""
        value = self.header("Error-Code")
        if value is None or not re.fullmatch(r"[0-9]{3}", value):
            return None
        return int(value)


def is_valid_header_name(value: str) -> bool:
    """Header and info names match ``[A-Za-z-]+``."""
    return bool(_VNAME_RE.fullmatch(value))


def is_valid_identifier(value: str) -> bool:
    """Empty, or a URL: scheme, '://', no spaces, no CR/LF."""
    return value == "" or bool(_IDENTIFIER_RE.fullmatch(value))


def validate_identifier(value: str) -> str:
    if not is_valid_identifier(value):
        raise ValueError(f"invalid node identifier: {value!r}")
    return value


def is_valid_node_name(value: str) -> bool:
    """Node names may not contain CR, LF, '{' or '}'."""
    return not any(c in value for c in "\r\n{}")


def validate_node_name(value: str) -> str:
    if not is_valid_node_name(value):
        raise ValueError(f"invalid node name: {value!r}")
    return value


def is_valid_transaction_id(value: str) -> bool:
    """Non-empty and free of spaces, CR and LF."""
    return value != "" and not any(c in value for c in " \r\n")


def is_valid_merge_algorithm(value: str) -> bool:
    return bool(_MERGE_ALGORITHM_RE.fullmatch(value))


def _body_length(headers: list[tuple[str, str]]) -> int:
    """Declared body length: the first Content-Length when it is a positive
    integer, else 0 (absent, empty, zero or non-numeric all mean no body)."""
    for n, v in headers:
        if n == "Content-Length":
            if re.fullmatch(r"[0-9]+", v):
                return int(v)
            return 0
    return 0


def parse_message(data: bytes) -> Message:
    """Parse one complete framed message.

    The re-serialization of the result is byte-identical to canonical
    input; header order is preserved as read.
    """
    sep = data.find(CRLF + CRLF)
    if sep < 0:
        raise ParseError(INVALID_MESSAGE, "unterminated header")
    try:
        header_text = data[:sep].decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError(INVALID_MESSAGE, "header is not valid UTF-8") from None
    rest = data[sep + 4:]

    lines = header_text.split("\r\n")
    m = _ID_LINE_RE.fullmatch(lines[0])
    if m is None:
        raise ParseError(INVALID_MESSAGE, f"malformed ID-LINE: {lines[0]!r}")
    msg_type = _MSGTYPE_BY_TOKEN.get(m.group(3))
    if msg_type is None:
        raise ParseError(INVALID_MESSAGE, f"unknown message type: {m.group(3)!r}")
    version = (int(m.group(1)), int(m.group(2)))

    headers: list[tuple[str, str]] = []
    for line in lines[1:]:
        hm = _HEADER_LINE_RE.fullmatch(line)
        if hm is None:
            raise ParseError(INVALID_MESSAGE, f"malformed header line: {line!r}")
        headers.append((hm.group(1), hm.group(2)))

    for name in ("Msg-From", "Msg-To"):
        values = [v for n, v in headers if n == name]
        if not values:
            raise ParseError(MISSING_HEADER, name)
        if len(values) > 1:
            raise ParseError(INVALID_MESSAGE, f"duplicate {name}")
        if not is_valid_identifier(values[0]):
            raise ParseError(INVALID_MESSAGE, f"invalid identifier in {name}: {values[0]!r}")
    if len([1 for n, _ in headers if n == "Content-Length"]) > 1:
        raise ParseError(INVALID_MESSAGE, "duplicate Content-Length")

    length = _body_length(headers)
    if len(rest) != length:
        raise ParseError(
            INVALID_MESSAGE,
            f"body length {len(rest)} does not match declared {length}",
        )
    body: bytes | None = None
    if length > 0:
        try:
            rest.decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(INVALID_MESSAGE, "body is not valid UTF-8") from None
        body = rest

    return Message(msg_type, headers, body, version)


def _canonical_headers(m: Message) -> list[tuple[str, str]]:
    specific = _CANONICAL_SPECIFIC[m.msg_type]
    buckets: dict[str, list[tuple[str, str]]] = {}
    remainder: list[tuple[str, str]] = []
    for n, v in m.headers:
        if n in ("Msg-From", "Msg-To", "Content-Length") or n in specific:
            buckets.setdefault(n, []).append((n, v))
        else:
            remainder.append((n, v))
    ordered: list[tuple[str, str]] = []
    for name in ("Msg-From", "Msg-To", *specific):
        ordered.extend(buckets.get(name, []))
    ordered.extend(remainder)
    ordered.extend(buckets.get("Content-Length", []))
    return ordered


def serialize_message(m: Message, canonical: bool = False) -> bytes:
    """Emit the wire form of ``m``.

    With ``canonical=True`` headers are reordered (Msg-From, Msg-To,
    message-specific headers in grammar order, Content-Length last);
    otherwise the stored order is kept.  Invariant violations raise
    ValueError: they are programming errors, not wire errors.
    """
    for d in m.version:
        if not 0 <= d <= 9:
            raise ValueError(f"version digits must be 0-9: {m.version}")
    for name in ("Msg-From", "Msg-To"):
        values = m.header_values(name)
        if len(values) != 1:
            raise ValueError(f"message must carry exactly one {name}")
        if not is_valid_identifier(values[0]):
            raise ValueError(f"invalid identifier in {name}: {values[0]!r}")
    for n, v in m.headers:
        if not _VNAME_RE.fullmatch(n):
            raise ValueError(f"invalid header name: {n!r}")
        if "\r" in v or "\n" in v:
            raise ValueError(f"header value contains CR/LF: {n}")
        # A leading space would be eaten by the parser's colon-space rule
        # and break the round-trip.
        if v.startswith(" "):
            raise ValueError(f"header value starts with a space: {n}")
    declared = _body_length(m.headers)
    actual = len(m.body) if m.body is not None else 0
    if (m.body is None) != (declared == 0) or (m.body is not None and declared != actual):
        raise ValueError(f"Content-Length {declared} does not match body length {actual}")

    headers = _canonical_headers(m) if canonical else m.headers
    out = bytearray()
    out += f"DXQP-{m.version[0]}.{m.version[1]} {m.msg_type.value}".encode("utf-8")
    out += CRLF
    for n, v in headers:
        out += f"{n}: {v}".encode("utf-8")
        out += CRLF
    out += CRLF
    if m.body is not None:
        out += m.body
    return bytes(out)


def make_message(
    msg_type: MessageType,
    msg_from: str,
    msg_to: str,
    headers: list[tuple[str, str]] | tuple = (),
    body: bytes | str | None = None,
) -> Message:
    """Build a message in canonical header order; adds Content-Length
    when a non-empty body is given."""
    if isinstance(body, str):
        body = body.encode("utf-8")
    if body == b"":
        body = None
    all_headers = [("Msg-From", msg_from), ("Msg-To", msg_to), *headers]
    if body is not None:
        all_headers.append(("Content-Length", str(len(body))))
    return Message(msg_type, all_headers, body)


def make_error(
    msg_from: str,
    msg_to: str,
    code: int,
    detail: bytes | str | None = None,
) -> Message:
    """An ERROR message; ``detail``, when given, becomes the body."""
    if not 100 <= code <= 999:
        raise ValueError(f"error code out of range: {code}")
    return make_message(
        MessageType.ERROR, msg_from, msg_to,
        [("Error-Code", f"{code:03d}")], body=detail,
    )


def format_result_sources(names: list[str]) -> str:
    """Each name braced, single-space separated: ``{A} {B}``."""
    if not names:
        raise ValueError("Result-Sources requires at least one name")
    for name in names:
        validate_node_name(name)
    return " ".join("{" + name + "}" for name in names)


def parse_result_sources(value: str) -> list[str]:
    if not _RESULT_SOURCES_RE.fullmatch(value):
        raise ValueError(f"malformed Result-Sources value: {value!r}")
    return re.findall(r"\{([^{}]*)\}", value)


def parse_space_list(value: str) -> list[str]:
    """Split a single-space-separated token list; empty string is empty."""
    return [token for token in value.split(" ") if token]


def format_space_list(tokens: list[str]) -> str:
    for token in tokens:
        if " " in token or "\r" in token or "\n" in token:
            raise ValueError(f"token contains whitespace: {token!r}")
    return " ".join(tokens)


def format_xdp_spec_list(entries: list[tuple[str | None, str]]) -> str:
    """XDP-SPEC entries: optional identifier immediately followed by the
    braced name, entries single-space separated."""
    parts = []
    for identifier, name in entries:
        validate_node_name(name)
        if identifier:
            validate_identifier(identifier)
        parts.append((identifier or "") + "{" + name + "}")
    return " ".join(parts)


def parse_xdp_spec_list(value: str) -> list[tuple[str | None, str]]:
    """Inverse of :func:`format_xdp_spec_list`; names may contain spaces."""
    entries: list[tuple[str | None, str]] = []
    pos = 0
    while pos < len(value):
        end = value.find("}", pos)
        if end < 0:
            raise ValueError(f"malformed XDP-SPEC list: {value!r}")
        m = _XDP_SPEC_RE.fullmatch(value[pos:end + 1])
        if m is None:
            raise ValueError(f"malformed XDP-SPEC entry: {value[pos:end + 1]!r}")
        entries.append((m.group(1) or None, m.group(2)))
        pos = end + 1
        if pos < len(value):
            if value[pos] != " ":
                raise ValueError(f"malformed XDP-SPEC list: {value!r}")
            pos += 1
    if not entries and value:
        raise ValueError(f"malformed XDP-SPEC list: {value!r}")
    return entries
