"""XML-Document Provider node.

Serves queries against one immutable exported document, answers info
requests, and maintains its session with a single distributor: register,
sign into the distribution list, periodically verify both, and leave
cleanly.  Query handling is stateless and safe for concurrent use; the
session operations (join, leave, self_check) serialize against each
other.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from . import protocol
from .protocol import Message, MessageType, format_space_list, make_error, make_message
from .query import QueryError, run_query
from .transport import DEFAULT_TIMEOUT, TransportError, exchange
from .xmltree import XmlNode

log = logging.getLogger("dxq.xdp")

UNREGISTERED = "unregistered"
REGISTERED = "registered"
IN_DISTRIBUTION_LIST = "in-distribution-list"

_INFO_NAMES = ("Node-Name", "Admin", "Active-Queries")


class SessionError(Exception):
    """Session operation invoked in the wrong phase or refused upstream."""


@dataclass
class XdpConfig:
    identifier: str
    node_name: str
    xqd_identifier: str
    document: XmlNode
    admin_info: str = ""
    self_check_interval: float = 30.0
    request_timeout: float = DEFAULT_TIMEOUT
    join_backoff_base: float = 1.0
    join_backoff_cap: float = 60.0


@dataclass
class _ActiveQueries:
    lock: threading.Lock = field(default_factory=threading.Lock)
    by_txn: dict[str, str] = field(default_factory=dict)  # txn -> asker identifier


class XdpNode:
    def __init__(self, config: XdpConfig, transport):
        protocol.validate_identifier(config.identifier)
        protocol.validate_node_name(config.node_name)
        if not config.identifier:
            raise ValueError("a document provider needs a non-empty identifier")
        self.config = config
        self.transport = transport
        self.phase = UNREGISTERED
        self._session_lock = threading.RLock()
        self._want_dl = False
        self._active = _ActiveQueries()

    def frame_handler(self):
        from .transport import node_frame_handler
        return node_frame_handler(self.config.identifier, self.handle)

    # -- inbound ----------------------------------------------------------

    def handle(self, m: Message) -> Message:
        if m.msg_type == MessageType.XML_QUERY:
            return self._handle_query(m)
        if m.msg_type == MessageType.INFO_REQUEST:
            return self._handle_info(m)
        return self._error(m, protocol.UNEXPECTED_MESSAGE,
                           f"{m.msg_type.value} is not expected by a document provider")

    def allow_query(self, m: Message) -> bool:
        """Policy hook for declining queries; the default allows all."""
        return True

    def _handle_query(self, m: Message) -> Message:
        txn = m.transaction_id
        if txn is None:
            return self._error(m, protocol.MISSING_HEADER, "Transaction-ID")
        if not protocol.is_valid_transaction_id(txn):
            return self._error(m, protocol.INVALID_MESSAGE,
                               f"invalid Transaction-ID: {txn!r}")
        if m.body is None:
            return self._error(m, protocol.MISSING_CONTENT,
                               "the query must be given in the message body")
        if not self.allow_query(m):
            return self._error(m, 900, "query declined by provider policy")
        with self._active.lock:
            self._active.by_txn[txn] = m.msg_from
        try:
            result = run_query(m.body.decode("utf-8"), self.config.document)
        except QueryError as e:
            return self._error(m, protocol.QUERY_PROCESSOR_ERROR, str(e))
        finally:
            with self._active.lock:
                self._active.by_txn.pop(txn, None)
        headers: list[tuple[str, str]] = [("Transaction-ID", txn)]
        if not result:
            # An empty result still carries the mandatory Content-Length.
            headers.append(("Content-Length", "0"))
        return make_message(MessageType.XML_QUERY_RESULT, self.config.identifier,
                            m.msg_from, headers, body=result or None)

    def _handle_info(self, m: Message) -> Message:
        request = m.header("Request")
        if request is None:
            return self._error(m, protocol.MISSING_HEADER, "Request")
        if request == "*":
            names = list(_INFO_NAMES)
        else:
            names = protocol.parse_space_list(request)
        headers: list[tuple[str, str]] = []
        for name in names:
            if not protocol.is_valid_header_name(name):
                return self._error(m, protocol.INVALID_MESSAGE,
                                   f"invalid INFO-NAME: {name!r}")
            headers.append((name, self._info_value(name, m.msg_from)))
        return make_message(MessageType.INFO_REPLY, self.config.identifier,
                            m.msg_from, headers)

    def _info_value(self, name: str, asker: str) -> str:
        if name == "Node-Name":
            return self.config.node_name
        if name == "Admin":
            return self.config.admin_info
        if name == "Active-Queries":
            with self._active.lock:
                txns = [t for t, who in self._active.by_txn.items() if who == asker]
            return format_space_list(txns)
        return ""  # unsupported names answer with an empty value

    def _error(self, m: Message, code: int, detail: str) -> Message:
        return make_error(self.config.identifier, m.msg_from, code, detail)

    # -- session with the distributor -------------------------------------

    def _send(self, msg_type: MessageType, headers=()) -> Message:
        m = make_message(msg_type, self.config.identifier,
                         self.config.xqd_identifier, list(headers))
        return exchange(self.transport, self.config.xqd_identifier, m,
                        timeout=self.config.request_timeout)

    def join(self, max_attempts: int | None = None, sleep=time.sleep,
             should_stop=lambda: False) -> str:
        """Register and sign into the distribution list.

        Transport failures are retried with exponential backoff; an ERROR
        reply to REGISTER leaves the node unregistered, an ERROR reply to
        ADDTODL leaves it registered only.  Returns the phase reached.
        """
        with self._session_lock:
            if self.phase != UNREGISTERED:
                raise SessionError(f"cannot join while {self.phase}")
            self._want_dl = True
            attempt = 0
            while True:
                if should_stop():
                    return self.phase
                try:
                    return self._join_once()
                except TransportError as e:
                    attempt += 1
                    if max_attempts is not None and attempt >= max_attempts:
                        raise
                    delay = min(self.config.join_backoff_base * 2 ** (attempt - 1),
                                self.config.join_backoff_cap)
                    log.warning("join attempt %d failed (%s); retrying in %.0fs",
                                attempt, e, delay)
                    sleep(delay)

    def _join_once(self) -> str:
        if self.phase == UNREGISTERED:
            reply = self._send(MessageType.REGISTER,
                               [("Node-Name", self.config.node_name)])
            if reply.msg_type != MessageType.OK:
                log.warning("registration refused: %s", reply.error_code())
                return self.phase
            self.phase = REGISTERED
        try:
            reply = self._send(MessageType.ADDTODL)
        except TransportError:
            # The request may have been processed even though the reply was
            # lost; ask before retrying.
            registered, in_dl = self._remote_status()
            if registered and in_dl:
                self.phase = IN_DISTRIBUTION_LIST
                return self.phase
            raise
        if reply.msg_type == MessageType.OK:
            self.phase = IN_DISTRIBUTION_LIST
        else:
            log.warning("distribution-list sign-in refused: %s", reply.error_code())
        return self.phase

    def leave(self, sign_off_dl: bool = True) -> str:
        """Sign off the distribution list (optional) and unregister."""
        with self._session_lock:
            if self.phase == UNREGISTERED:
                raise SessionError("not registered")
            self._want_dl = False
            if self.phase == IN_DISTRIBUTION_LIST and sign_off_dl:
                reply = self._send(MessageType.RMFROMDL)
                if reply.msg_type == MessageType.OK:
                    self.phase = REGISTERED
                else:
                    log.warning("RMFROMDL answered with %s", reply.error_code())
                    self._reconcile()
            reply = self._send(MessageType.UNREGISTER)
            if reply.msg_type == MessageType.OK:
                self.phase = UNREGISTERED
            else:
                log.warning("UNREGISTER answered with %s", reply.error_code())
                self._reconcile()
            return self.phase

    def self_check(self) -> str:
        """Verify registration and list membership; rejoin when dropped."""
        with self._session_lock:
            self._reconcile()
            if self._want_dl and self.phase != IN_DISTRIBUTION_LIST:
                if self.phase == UNREGISTERED:
                    log.info("dropped by the distributor; registering again")
                    self._join_once()
                else:
                    log.info("no longer in the distribution list; signing in again")
                    reply = self._send(MessageType.ADDTODL)
                    if reply.msg_type == MessageType.OK:
                        self.phase = IN_DISTRIBUTION_LIST
            return self.phase

    def _reconcile(self) -> None:
        registered, in_dl = self._remote_status()
        if in_dl:
            self.phase = IN_DISTRIBUTION_LIST
        elif registered:
            self.phase = REGISTERED
        else:
            self.phase = UNREGISTERED

    def _remote_status(self) -> tuple[bool, bool]:
        m = make_message(MessageType.INFO_REQUEST, self.config.identifier,
                         self.config.xqd_identifier,
                         [("Request", "Registered Is-in-DL")])
        reply = exchange(self.transport, self.config.xqd_identifier, m,
                         timeout=self.config.request_timeout)
        if reply.msg_type != MessageType.INFO_REPLY:
            raise TransportError("closed",
                                 f"status request answered with {reply.msg_type.value}")
        return reply.header("Registered") == "yes", reply.header("Is-in-DL") == "yes"
