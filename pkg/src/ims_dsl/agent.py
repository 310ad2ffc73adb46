"""SIP user agent: registration lifecycle, transactions and dialogs.

All traffic goes to the core endpoint; the core routes it onwards. Every
callback runs on the agent's :class:`~ims_dsl.loop.EventLoop`. Blocking
helpers (:meth:`UserAgent.register`, :meth:`Transaction.wait`) pump that
loop until the awaited response arrives.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

from .errors import InvalidMessage, MalformedMessage, NotRegistered, RegistrationFailed, Timeout
from .loop import EventLoop, TimerHandle
from .sip import (
    RequestType,
    SipMessage,
    SipUri,
    StatusCode,
    make_response,
    parse_message,
    serialize_message,
    transaction_key,
)
from .trace import RECEIVED, SENT, TIMEOUT, Tracer, current_site

log = logging.getLogger(__name__)

TRANSACTION_TIMEOUT = 5.0
PASSWORD_HEADER = "X-Sim-Password"


@dataclass(frozen=True)
class Credentials:
    username: str
    domain: str
    password: str

    def __post_init__(self):
        if not (self.username and self.domain and self.password):
            raise ValueError("username, domain and password must all be non-empty")

    @property
    def uri(self) -> SipUri:
        return SipUri(self.username, self.domain)


@dataclass
class RegistrationState:
    status: str = "unregistered"
    expiry_seconds: int = 3600
    refresh_enabled: bool = True
    expires_at: float | None = None
    refresh_at: float | None = None


@dataclass
class Transaction:
    """An outgoing request and the responses collected for it."""

    key: str
    request: SipMessage
    deadline: float
    callback: Callable[[SipMessage], None] | None = None
    site: str = ""
    responses: list[SipMessage] = field(default_factory=list)
    final: SipMessage | None = None
    agent: UserAgent | None = field(default=None, repr=False)
    timer: TimerHandle | None = field(default=None, repr=False)

    @property
    def call_id(self) -> str:
        return self.request.call_id

    @property
    def done(self) -> bool:
        return self.final is not None

    def wait(self, timeout: float = TRANSACTION_TIMEOUT + 1.0) -> SipMessage:
        """Pump the loop until the final response (possibly a synthetic 408)."""
        self.agent.loop.run_until(lambda: self.final is not None, timeout)
        if self.final is None:
            raise Timeout(f"no final response for {self.key}")
        return self.final


class UserAgent:
    def __init__(self, loop: EventLoop, network, core_address: str, creds: Credentials, *,
                 address: str | None = None, tracer: Tracer | None = None,
                 app_id: str | None = None, seed: int = 0, expiry_seconds: int = 3600,
                 refresh: bool = True):
        self.loop = loop
        self.network = network
        self.core_address = core_address
        self.creds = creds
        self.uri = creds.uri
        self.tracer = tracer
        self.app_id = app_id or creds.username
        self.seed = seed
        self.registration = RegistrationState(expiry_seconds=expiry_seconds, refresh_enabled=refresh)
        self.attachment = network.attach(address or f"{creds.username}@{creds.domain}",
                                         self._on_datagram)
        self.endpoint = self.attachment.address
        self.on_request: Callable[[SipMessage], None] | None = None
        self.on_response: Callable[[SipMessage], None] | None = None
        self.on_control: Callable[[str], None] | None = None
        self.dialogs: dict[SipUri, str] = {}
        self.pending: dict[str, Transaction] = {}
        self._unanswered: dict[str, tuple[SipMessage, str]] = {}
        self._call_counter = itertools.count(1)
        self._cseq: dict[str, int] = {}
        self._register_call_id: str | None = None
        self._refresh_timer: TimerHandle | None = None
        self._expiry_timer: TimerHandle | None = None

    # identifiers

    def new_call_id(self) -> str:
        return f"{next(self._call_counter)}-{self.seed}.{self.uri.user}@{self.uri.domain}"

    def _next_cseq(self, call_id: str) -> int:
        value = self._cseq.get(call_id, 0) + 1
        self._cseq[call_id] = value
        return value

    def _saw_cseq(self, call_id: str, number: int) -> None:
        if number > self._cseq.get(call_id, 0):
            self._cseq[call_id] = number

    # wire

    def _emit(self, data: bytes, to: str | None = None) -> None:
        if self.tracer is not None:
            self.tracer.record(self.app_id, SENT, data)
        self.attachment.send(to or self.core_address, data)

    def send_control(self, line: str) -> None:
        """Send a non-SIP control record (MRF command) to the core."""
        self.attachment.send(self.core_address, line.encode("utf-8"))

    def _on_datagram(self, data: bytes, source: str) -> None:
        if data.startswith(b"MRF"):
            if self.on_control is not None:
                self.on_control(data.decode("utf-8", errors="replace"))
            return
        try:
            msg = parse_message(data)
        except MalformedMessage as exc:
            if self.tracer is not None:
                self.tracer.record(self.app_id, RECEIVED, data, "malformed")
            log.warning("%s: dropping malformed datagram from %s: %s", self.app_id, source, exc)
            return
        if msg.is_response:
            self._handle_response(msg, data)
        else:
            self._handle_request(msg, data, source)

    # outgoing requests

    def build_request(self, method: RequestType, target: SipUri | str, *, headers=(),
                      body: bytes | str = b"", content_type: str | None = None,
                      call_id: str | None = None, from_uri: SipUri | str | None = None) -> SipMessage:
        if method is RequestType.ANY:
            raise InvalidMessage("the Any wildcard cannot be sent")
        target = SipUri.parse(target)
        extra = list(headers)
        override = next((v for n, v in extra if n.lower() == "call-id"), None)
        extra = [(n, v) for n, v in extra if n.lower() != "call-id"]
        if call_id is None:
            call_id = override
        if call_id is None and method in (RequestType.INFO, RequestType.BYE, RequestType.INVITE):
            call_id = self.dialogs.get(target)
        if call_id is None:
            call_id = self.new_call_id()
        sender = SipUri.parse(from_uri) if from_uri is not None else self.uri
        base = [
            ("Via", f"SIP/2.0/UDP {self.endpoint}"),
            ("From", f"<{sender}>"),
            ("To", f"<{target}>"),
            ("Call-ID", call_id),
            ("CSeq", f"{self._next_cseq(call_id)} {method.value}"),
        ]
        return SipMessage.request(method, target, base + extra, body, content_type)

    def send_request(self, method: RequestType, target: SipUri | str, *, headers=(),
                     body: bytes | str = b"", content_type: str | None = None,
                     on_response: Callable[[SipMessage], None] | None = None,
                     call_id: str | None = None, from_uri: SipUri | str | None = None,
                     require_registration: bool = True) -> Transaction:
        if require_registration and method is not RequestType.REGISTER and not self.registered:
            raise NotRegistered(f"{self.uri} is not registered")
        request = self.build_request(method, target, headers=headers, body=body,
                                     content_type=content_type, call_id=call_id, from_uri=from_uri)
        return self.send_message(request, on_response)

    def send_message(self, request: SipMessage,
                     on_response: Callable[[SipMessage], None] | None = None) -> Transaction:
        data = serialize_message(request)
        key = transaction_key(request)
        tx = Transaction(key, request, self.loop.time() + TRANSACTION_TIMEOUT, on_response,
                         current_site(), agent=self)
        if request.method is not RequestType.ACK:
            self.pending[key] = tx
            tx.timer = self.loop.call_later(TRANSACTION_TIMEOUT, self._expire, key)
        if request.method is RequestType.BYE:
            self._forget_dialog(request.call_id)
        self._emit(data)
        return tx

    def _expire(self, key: str) -> None:
        tx = self.pending.pop(key, None)
        if tx is None:
            return
        response = make_response(tx.request, StatusCode.REQUEST_TIMEOUT)
        if self.tracer is not None:
            self.tracer.record(self.app_id, TIMEOUT, serialize_message(response), tx.site)
        self._complete(tx, response)

    def _complete(self, tx: Transaction, response: SipMessage) -> None:
        tx.responses.append(response)
        if response.status.is_final:
            tx.final = response
            if tx.timer is not None:
                tx.timer.cancel()
        if tx.callback is not None:
            try:
                tx.callback(response)
            except Exception:
                log.exception("response callback failed for %s", tx.key)

    def _handle_response(self, msg: SipMessage, data: bytes) -> None:
        key = transaction_key(msg)
        tx = self.pending.get(key)
        if self.tracer is not None:
            self.tracer.record(self.app_id, RECEIVED, data, tx.site if tx else "")
        if tx is None:
            log.debug("%s: stray response %s", self.app_id, key)
            return
        if msg.status.is_final:
            del self.pending[key]
            if tx.request.method is RequestType.INVITE and 200 <= msg.status.code < 300:
                self._remember_dialog(tx.request.request_uri, tx.call_id)
        self._complete(tx, msg)
        if self.on_response is not None:
            self.on_response(msg)

    # incoming requests

    def _handle_request(self, msg: SipMessage, data: bytes, source: str) -> None:
        if self.tracer is not None:
            self.tracer.record(self.app_id, RECEIVED, data, "incoming")
        self._saw_cseq(msg.call_id, msg.cseq[0])
        if msg.method is not RequestType.ACK:
            self._unanswered[transaction_key(msg)] = (msg, source)
        if self.on_request is not None:
            self.on_request(msg)
        elif msg.method is not RequestType.ACK:
            self.send_response(msg, StatusCode.OK)

    def is_unanswered(self, request: SipMessage) -> bool:
        return transaction_key(request) in self._unanswered

    def send_response(self, request: SipMessage, code: StatusCode,
                      headers: tuple[tuple[str, str], ...] = ()) -> SipMessage:
        key = transaction_key(request) if request.is_request else None
        if key is None or key not in self._unanswered:
            raise InvalidMessage("request was not received by this agent or is already answered")
        original, source = self._unanswered[key]
        response = make_response(original, code)
        for name, value in headers:
            response = response.with_header(name, value)
        if code.is_final:
            del self._unanswered[key]
            if 200 <= code.code < 300:
                self._after_answer(original)
        self._emit(serialize_message(response), source)
        return response

    # dialogs

    def _remember_dialog(self, peer: SipUri, call_id: str) -> None:
        for uri, cid in list(self.dialogs.items()):
            if cid == call_id:
                del self.dialogs[uri]
        self.dialogs[peer] = call_id

    def _forget_dialog(self, call_id: str) -> None:
        for uri, cid in list(self.dialogs.items()):
            if cid == call_id:
                del self.dialogs[uri]

    def _after_answer(self, request: SipMessage) -> None:
        if request.method is RequestType.INVITE:
            contact = request.header("Contact")
            if contact:
                self._remember_dialog(SipUri.parse(contact), request.call_id)
            elif request.call_id not in self.dialogs.values():
                self._remember_dialog(request.from_uri, request.call_id)
        elif request.method is RequestType.BYE:
            self._forget_dialog(request.call_id)

    # registration

    @property
    def registered(self) -> bool:
        return self.registration.status == "registered"

    def _register_request(self, expiry: int) -> SipMessage:
        if self._register_call_id is None:
            self._register_call_id = self.new_call_id()
        return self.build_request(
            RequestType.REGISTER, self.uri, call_id=self._register_call_id,
            headers=[("Expires", str(expiry)), (PASSWORD_HEADER, self.creds.password)])

    def register(self, timeout: float = TRANSACTION_TIMEOUT) -> RegistrationState:
        """Register with the core and block until the outcome is known."""
        state = self.registration
        state.status = "pending"
        tx = self.send_message(self._register_request(state.expiry_seconds), self._on_register)
        self.loop.run_until(lambda: tx.final is not None, timeout + 0.5)
        final = tx.final
        if final is None or final.status is StatusCode.REQUEST_TIMEOUT:
            state.status = "failed"
            raise Timeout(f"no response to REGISTER from {self.core_address}")
        if not 200 <= final.status.code < 300:
            raise RegistrationFailed(final.status.code)
        return state

    def _on_register(self, response: SipMessage) -> None:
        if not response.status.is_final:
            return
        state = self.registration
        if not 200 <= response.status.code < 300:
            state.status = "failed"
            state.expires_at = state.refresh_at = None
            return
        expiry = int(response.header("Expires") or state.expiry_seconds)
        if expiry == 0:
            self._clear_timers()
            state.status = "unregistered"
            state.expires_at = state.refresh_at = None
            return
        now = self.loop.time()
        state.status = "registered"
        state.expires_at = now + expiry
        self._clear_timers()
        self._expiry_timer = self.loop.call_later(expiry, self._registration_lapsed)
        if state.refresh_enabled:
            state.refresh_at = now + expiry / 2.0
            self._refresh_timer = self.loop.call_later(expiry / 2.0, self._refresh)
        else:
            state.refresh_at = None

    def _refresh(self) -> None:
        if self.registered:
            self.send_message(self._register_request(self.registration.expiry_seconds),
                              self._on_register)

    def _registration_lapsed(self) -> None:
        state = self.registration
        if state.expires_at is not None and self.loop.time() >= state.expires_at:
            state.status = "unregistered"
            state.expires_at = None

    def _clear_timers(self) -> None:
        for timer in (self._refresh_timer, self._expiry_timer):
            if timer is not None:
                timer.cancel()
        self._refresh_timer = self._expiry_timer = None

    def unregister(self) -> None:
        if not self.registered:
            return
        tx = self.send_message(self._register_request(0), self._on_register)
        tx.wait()

    # presence

    def subscribe(self, target: SipUri | str) -> StatusCode:
        """SUBSCRIBE to ``target``'s presence; returns the final status."""
        tx = self.send_request(RequestType.SUBSCRIBE, target, headers=[("Event", "presence")])
        final = tx.wait()
        if final.status is StatusCode.REQUEST_TIMEOUT:
            raise Timeout(f"no response to SUBSCRIBE for {target}")
        return final.status

    def close(self) -> None:
        self._clear_timers()
        for tx in self.pending.values():
            if tx.timer is not None:
                tx.timer.cancel()
        self.attachment.detach()
