"""Request/response transport for framed DXQP messages.

Two bindings share one interface:

* ``TcpTransport`` speaks raw DXQP frames over TCP; the target's
  ``dxqp://host:port/`` identifier carries the port.  Channels are kept
  open and reused; requests on one channel are strictly sequential.
* ``MemNetwork`` is a process-local registry keyed by identifier URL,
  used by tests and the CLI's ``--transport mem`` mode.  It supports
  fault injection (unreachable targets, timeouts, dropped replies) and
  wire taps, without real sleeping.

Framing: a frame is the header section up to and including the blank
CRLF line, plus exactly Content-Length body bytes when that header holds
a positive integer.  Unparseable input on a channel is answered with an
ERROR (code 100, empty ``Msg-To`` since the sender is unknown) and the
channel is closed.  Oversized frames are answered with ERROR 500.
"""

from __future__ import annotations

import logging
import re
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Union
from urllib.parse import urlsplit

from .protocol import (
    INTERNAL_ERROR,
    Message,
    ParseError,
    make_error,
    parse_message,
    serialize_message,
    validate_identifier,
)

log = logging.getLogger("dxq.transport")

DEFAULT_TIMEOUT = 10.0
MAX_HEADER_BYTES = 64 * 1024
MAX_BODY_BYTES = 64 * 1024 * 1024

_CONTENT_LENGTH = b"Content-Length:"


class TransportError(Exception):
    """Channel-level failure; ``kind`` is 'connect', 'timeout' or 'closed'."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


class FramingError(Exception):
    """The byte stream does not contain a complete frame."""


class FrameTooLarge(FramingError):
    """Frame exceeds the configured header or body limit."""


@dataclass(frozen=True)
class Endpoint:
    """Network address derived from a node identifier URL."""

    scheme: str
    host: str
    port: int
    path: str
    url: str

    @classmethod
    def from_identifier(cls, identifier: Union[str, "Endpoint"]) -> "Endpoint":
        if isinstance(identifier, Endpoint):
            return identifier
        validate_identifier(identifier)
        if identifier == "":
            raise ValueError("the empty identifier has no endpoint")
        parts = urlsplit(identifier)
        netloc = parts.netloc
        host, port = netloc, 0
        m = re.fullmatch(r"(.*):([0-9]+)", netloc)
        if m:
            host, port = m.group(1), int(m.group(2))
        if parts.scheme == "dxqp" and not 0 <= port <= 65535:
            raise ValueError(f"port out of range in {identifier!r}")
        return cls(parts.scheme, host, port, parts.path, identifier)


@dataclass
class FrameReply:
    """A listener's answer to one inbound frame."""

    frame: bytes
    after_send: Optional[Callable[[], None]] = None
    close: bool = False


FrameHandler = Callable[[bytes], FrameReply]


def _declared_length(header: bytes) -> int:
    for line in header.split(b"\r\n"):
        if line.startswith(_CONTENT_LENGTH):
            value = line[len(_CONTENT_LENGTH):].lstrip(b" ")
            if re.fullmatch(rb"[0-9]+", value):
                return int(value)
            return 0
    return 0


def read_frame(stream, max_header: int = MAX_HEADER_BYTES,
               max_body: int = MAX_BODY_BYTES) -> bytes | None:
    """Read exactly one frame from a binary stream.

    Returns None on a clean end-of-stream at a message boundary; raises
    :class:`FramingError` when the stream ends mid-message.
    """
    header = bytearray()
    while True:
        line = stream.readline()
        if not line:
            if not header:
                return None
            raise FramingError("end of stream inside a message header")
        header += line
        if len(header) > max_header:
            raise FrameTooLarge(f"header section exceeds {max_header} bytes")
        if not line.endswith(b"\r\n"):
            raise FramingError("end of stream inside a header line")
        if line == b"\r\n":
            break

    length = _declared_length(bytes(header))
    if length > max_body:
        raise FrameTooLarge(f"declared body of {length} bytes exceeds {max_body}")
    body = bytearray()
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise FramingError("end of stream inside the message body")
        body += chunk
    return bytes(header + body)


def node_frame_handler(local_identifier: str,
                       handle: Callable[[Message], Union[Message, tuple]]) -> FrameHandler:
    """Wrap a node's message handler as a frame handler.

    Parse failures are answered with the ParseError's code and close the
    channel; version mismatches get ERROR 101; handler exceptions get
    ERROR 500.  ``handle`` may return a Message or a (Message, callback)
    pair whose callback runs after the reply has been sent.
    """

    def frame_handler(frame: bytes) -> FrameReply:
        try:
            request = parse_message(frame)
        except ParseError as e:
            reply = make_error(local_identifier, "", e.code, e.detail or None)
            log.info("unparseable frame -> ERROR %d (%s)", e.code, e.detail)
            return FrameReply(serialize_message(reply, canonical=True), close=True)
        if request.version != (1, 0):
            reply = make_error(
                local_identifier, request.msg_from, 101,
                f"unsupported protocol version {request.version[0]}.{request.version[1]}",
            )
            return FrameReply(serialize_message(reply, canonical=True))
        after = None
        try:
            result = handle(request)
            if isinstance(result, tuple):
                reply, after = result
            else:
                reply = result
        except Exception:
            log.exception("handler failed for %s from %s", request.msg_type.value,
                          request.msg_from)
            reply = make_error(local_identifier, request.msg_from, INTERNAL_ERROR,
                               "internal error while processing the message")
        log.info("%s %s -> %s txn=%s :: %s%s",
                 request.msg_type.value, request.msg_from or "(client)",
                 request.msg_to, request.transaction_id or "-",
                 reply.msg_type.value,
                 f" code={reply.header('Error-Code')}" if reply.header("Error-Code") else "")
        return FrameReply(serialize_message(reply, canonical=True), after_send=after)

    return frame_handler


def exchange(transport, target: str, message: Message,
             timeout: float | None = None) -> Message:
    """Send one message and parse the single response."""
    reply = transport.request(target, serialize_message(message, canonical=True),
                              timeout=timeout)
    return parse_message(reply)


@dataclass
class Fault:
    """Injected behavior for one in-memory endpoint."""

    mode: str  # "unreachable" | "timeout" | "drop-reply" | "delay"
    delay: float = 0.0


class _MemListener:
    def __init__(self, network: "MemNetwork", url: str):
        self._network = network
        self.identifier = url

    def close(self) -> None:
        self._network._unbind(self.identifier)


class MemNetwork:
    """Process-local transport: handlers keyed by identifier URL."""

    def __init__(self, default_timeout: float = DEFAULT_TIMEOUT):
        self.default_timeout = default_timeout
        self._lock = threading.Lock()
        self._tap_lock = threading.Lock()
        self._handlers: dict[str, FrameHandler] = {}
        self._faults: dict[str, Fault] = {}
        self._taps: list[Callable[[str, bytes], None]] = []

    def listen(self, endpoint: Union[str, Endpoint], handler: FrameHandler,
               error_identifier: str = "") -> _MemListener:
        url = Endpoint.from_identifier(endpoint).url
        with self._lock:
            if url in self._handlers:
                raise OSError(f"endpoint already in use: {url}")
            self._handlers[url] = handler
        return _MemListener(self, url)

    def _unbind(self, url: str) -> None:
        with self._lock:
            self._handlers.pop(url, None)

    def set_fault(self, url: str, mode: str | None, delay: float = 0.0) -> None:
        with self._lock:
            if mode is None:
                self._faults.pop(url, None)
            else:
                self._faults[url] = Fault(mode, delay)

    def add_tap(self, tap: Callable[[str, bytes], None]) -> None:
        with self._tap_lock:
            self._taps.append(tap)

    def remove_tap(self, tap: Callable[[str, bytes], None]) -> None:
        with self._tap_lock:
            self._taps.remove(tap)

    def reset(self) -> None:
        with self._lock:
            self._handlers.clear()
            self._faults.clear()
        with self._tap_lock:
            self._taps.clear()

    def _tap(self, kind: str, frame: bytes) -> None:
        with self._tap_lock:
            for tap in self._taps:
                tap(kind, frame)

    def request(self, target: str, frame: bytes,
                timeout: float | None = None) -> bytes:
        url = Endpoint.from_identifier(target).url
        effective = self.default_timeout if timeout is None else timeout
        with self._lock:
            handler = self._handlers.get(url)
            fault = self._faults.get(url)
        if fault is not None and fault.mode == "unreachable":
            raise TransportError("connect", f"{url} is unreachable")
        if handler is None:
            raise TransportError("connect", f"no listener at {url}")
        if fault is not None and fault.mode == "timeout":
            self._tap("request", frame)
            raise TransportError("timeout", f"no reply from {url}")
        self._tap("request", frame)
        reply = handler(frame)
        self._tap("response", reply.frame)
        if reply.after_send is not None:
            reply.after_send()
        # The listener processed the request and answered; the reply is
        # lost on the way back (or arrives after the deadline).
        if fault is not None and (
            fault.mode == "drop-reply"
            or (fault.mode == "delay" and fault.delay > effective)
        ):
            raise TransportError("timeout", f"reply from {url} lost or too late")
        return reply.frame


#: Shared instance used by the CLI's --transport mem mode and by tests that
#: run client commands against in-process nodes.
DEFAULT_MEM_NETWORK = MemNetwork()


class _TcpChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = sock.makefile("rb")

    def close(self) -> None:
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


class TcpListener:
    def __init__(self, endpoint: Endpoint, handler: FrameHandler,
                 error_identifier: str = "",
                 max_header: int = MAX_HEADER_BYTES,
                 max_body: int = MAX_BODY_BYTES,
                 tap: Callable[[str, bytes], None] | None = None):
        self._handler = handler
        self._error_identifier = error_identifier
        self._max_header = max_header
        self._max_body = max_body
        self._tap = tap
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((endpoint.host, endpoint.port))
        self._sock.listen()
        self.port = self._sock.getsockname()[1]
        self.identifier = f"dxqp://{endpoint.host}:{self.port}{endpoint.path or '/'}"
        self._closed = False
        self._conn_lock = threading.Lock()
        self._conns: set[socket.socket] = set()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _addr = self._sock.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        reader = conn.makefile("rb")
        try:
            while True:
                try:
                    frame = read_frame(reader, self._max_header, self._max_body)
                except FrameTooLarge as e:
                    reply = make_error(self._error_identifier, "", INTERNAL_ERROR, str(e))
                    conn.sendall(serialize_message(reply, canonical=True))
                    return
                except FramingError:
                    return
                if frame is None:
                    return
                if self._tap:
                    self._tap("request", frame)
                try:
                    reply = self._handler(frame)
                except Exception:
                    log.exception("frame handler failed")
                    return
                conn.sendall(reply.frame)
                if self._tap:
                    self._tap("response", reply.frame)
                if reply.after_send is not None:
                    reply.after_send()
                if reply.close:
                    return
        except OSError:
            return
        finally:
            reader.close()
            try:
                conn.close()
            except OSError:
                pass
            with self._conn_lock:
                self._conns.discard(conn)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass


class TcpTransport:
    """TCP binding with per-target channel reuse."""

    def __init__(self, default_timeout: float = DEFAULT_TIMEOUT,
                 tap: Callable[[str, bytes], None] | None = None):
        self.default_timeout = default_timeout
        self._tap = tap
        self._guard = threading.Lock()
        self._channels: dict[str, _TcpChannel] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._listeners: list[TcpListener] = []

    def listen(self, endpoint: Union[str, Endpoint], handler: FrameHandler,
               error_identifier: str = "",
               max_header: int = MAX_HEADER_BYTES,
               max_body: int = MAX_BODY_BYTES) -> TcpListener:
        ep = Endpoint.from_identifier(endpoint)
        listener = TcpListener(ep, handler, error_identifier,
                               max_header, max_body, tap=self._tap)
        with self._guard:
            self._listeners.append(listener)
        return listener

    def _target_lock(self, url: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(url, threading.Lock())

    def _connect(self, ep: Endpoint, timeout: float) -> _TcpChannel:
        if ep.port < 1:
            raise TransportError("connect", f"no usable port in {ep.url!r}")
        try:
            sock = socket.create_connection((ep.host, ep.port), timeout=timeout)
        except OSError as e:
            raise TransportError("connect", f"{ep.url}: {e}") from None
        return _TcpChannel(sock)

    def request(self, target: str, frame: bytes,
                timeout: float | None = None) -> bytes:
        ep = Endpoint.from_identifier(target)
        if ep.scheme != "dxqp":
            raise TransportError("connect",
                                 f"unsupported scheme {ep.scheme!r} for the TCP transport")
        effective = self.default_timeout if timeout is None else timeout
        with self._target_lock(ep.url):
            channel = self._channels.pop(ep.url, None)
            reused = channel is not None
            if channel is None:
                channel = self._connect(ep, effective)
            try:
                reply = self._exchange(channel, frame, effective)
            except TransportError as e:
                channel.close()
                # A cached channel may have been closed by the peer; retry
                # once on a fresh connection.  Timeouts are not retried.
                if not reused or e.kind == "timeout":
                    raise
                channel = self._connect(ep, effective)
                try:
                    reply = self._exchange(channel, frame, effective)
                except TransportError:
                    channel.close()
                    raise
            self._channels[ep.url] = channel
            return reply

    def _exchange(self, channel: _TcpChannel, frame: bytes, timeout: float) -> bytes:
        channel.sock.settimeout(timeout)
        if self._tap:
            self._tap("request", frame)
        try:
            channel.sock.sendall(frame)
            reply = read_frame(channel.reader)
        except socket.timeout:
            raise TransportError("timeout", "no response within the timeout") from None
        except (OSError, FramingError) as e:
            raise TransportError("closed", str(e)) from None
        if reply is None:
            raise TransportError("closed", "connection closed by peer")
        if self._tap:
            self._tap("response", reply)
        return reply

    def close(self) -> None:
        with self._guard:
            channels = list(self._channels.values())
            self._channels.clear()
            listeners = list(self._listeners)
            self._listeners.clear()
        for channel in channels:
            channel.close()
        for listener in listeners:
            listener.close()
