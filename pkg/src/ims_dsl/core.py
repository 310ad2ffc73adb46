"""Simulated IMS core: registrar/router, presence store, contact lists and a mock MRF.

The whole core is one node on the transport. SIP requests are routed to
the registrar binding of their request-URI; responses go back to the
endpoint in their Via header. When a conference server is configured and
registered, initial INVITEs from other users (and every later request in
those calls) are steered through it, the way an application server is
triggered in a real network.
"""

from __future__ import annotations

import logging
import re
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable

from .agent import PASSWORD_HEADER
from .config import ProvisionedUser, ProvisioningConfig
from .errors import ChannelClosed, MalformedMessage
from .loop import EventLoop
from .sip import (
    RequestType,
    SipMessage,
    SipUri,
    StatusCode,
    make_response,
    parse_message,
    serialize_message,
)

log = logging.getLogger(__name__)

CORE_ADDRESS = "core"
PRESENCE_CONTENT_TYPE = "application/pidf+xml"
_XML_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


def is_xml_name(name: str) -> bool:
    return bool(_XML_NAME.match(name)) and not name.lower().startswith("xml")


@dataclass
class RegistrarBinding:
    uri: SipUri
    endpoint: str
    expires_at: float


@dataclass
class PresenceDocument:
    owner: SipUri
    elements: dict[str, str] = field(default_factory=dict)
    watchers: dict[SipUri, str] = field(default_factory=dict)

    def serialize(self) -> str:
        children = "".join(f"<{tag}>{frag}</{tag}>" for tag, frag in self.elements.items())
        return f'<presence entity="{self.owner}">{children}</presence>'


@dataclass(frozen=True)
class MrfCommand:
    op: str
    conference_uri: SipUri
    participant_uri: SipUri
    seq: int

    def line(self) -> str:
        return f"MRF {self.seq} {self.op} {self.conference_uri} {self.participant_uri}"


@dataclass
class ContactBook:
    contacts: list[SipUri] = field(default_factory=list)
    lists: dict[str, list[SipUri]] = field(default_factory=dict)


def _via_endpoint(msg: SipMessage) -> str | None:
    via = msg.header("Via")
    if not via:
        return None
    parts = via.split()
    return parts[1].split(";", 1)[0] if len(parts) >= 2 else None


class ImsCore:
    def __init__(self, loop: EventLoop, network, config: ProvisioningConfig,
                 address: str = CORE_ADDRESS):
        self.loop = loop
        self.network = network
        self.config = config
        self.provisioned: dict[SipUri, ProvisionedUser] = {
            SipUri(u.username, u.domain): u for u in config.users}
        self.bindings: dict[SipUri, RegistrarBinding] = {}
        self.documents: dict[SipUri, PresenceDocument] = {}
        self.contact_books: dict[SipUri, ContactBook] = {}
        self.journal: list[MrfCommand] = []
        self.mrf_channels: dict[str, SipUri] = {}
        self.anchored: set[str] = set()
        self.routed: list[str] = []
        self.on_route: Callable[[str], None] | None = None
        self.conference_server = (SipUri.parse(config.conference_server)
                                  if config.conference_server else None)
        self._notify_cseq: dict[str, int] = {}
        self.attachment = network.attach(address, self._on_datagram)
        self.endpoint = self.attachment.address

    # helpers

    def _send(self, data: bytes, to: str) -> None:
        try:
            self.attachment.send(to, data)
        except Exception as exc:
            log.warning("core: send to %s failed: %s", to, exc)

    def _reply(self, request: SipMessage, code: StatusCode, to: str, headers=()) -> None:
        response = make_response(request, code)
        for name, value in headers:
            response = response.with_header(name, value)
        self._send(serialize_message(response), to)

    def _log(self, line: str) -> None:
        self.routed.append(line)
        log.info("core: %s", line)
        if self.on_route is not None:
            self.on_route(line)

    def sweep(self) -> None:
        now = self.loop.time()
        for uri in [u for u, b in self.bindings.items() if b.expires_at <= now]:
            del self.bindings[uri]

    def lookup(self, uri: SipUri) -> RegistrarBinding | None:
        self.sweep()
        return self.bindings.get(uri)

    def call_threadsafe(self, fn, *args, timeout: float = 5.0):
        """Run ``fn`` on the core's loop from another thread and return its result."""
        done = threading.Event()
        box: dict = {}

        def run():
            try:
                box["value"] = fn(*args)
            except Exception as exc:
                box["error"] = exc
            finally:
                done.set()

        self.loop.call_soon(run)
        if not done.wait(timeout):
            raise TimeoutError("core did not answer in time")
        if "error" in box:
            raise box["error"]
        return box["value"]

    # datagram entry point

    def _on_datagram(self, data: bytes, source: str) -> None:
        if data.startswith(b"MRF "):
            self._on_control(data.decode("utf-8", errors="replace").strip(), source)
            return
        try:
            msg = parse_message(data)
        except MalformedMessage as exc:
            log.warning("core: dropping malformed datagram from %s: %s", source, exc)
            return
        if msg.is_request and msg.method is RequestType.REGISTER:
            self.handle_register(msg, source)
        else:
            self.route(msg, data, source)

    # registrar

    def handle_register(self, msg: SipMessage, source: str) -> StatusCode:
        uri = msg.from_uri or msg.request_uri
        user = self.provisioned.get(uri)
        if user is None or msg.header(PASSWORD_HEADER) != user.password:
            self._log(f"REGISTER {uri} from {source} -> 403")
            self._reply(msg, StatusCode.FORBIDDEN, source)
            return StatusCode.FORBIDDEN
        try:
            expires = int(msg.header("Expires") or self.config.expiry_seconds)
        except ValueError:
            expires = self.config.expiry_seconds
        if expires <= 0:
            self.bindings.pop(uri, None)
        else:
            self.bindings[uri] = RegistrarBinding(uri, source, self.loop.time() + expires)
        self._log(f"REGISTER {uri} from {source} -> 200 (expires {expires})")
        self._reply(msg, StatusCode.OK, source, [("Expires", str(max(expires, 0)))])
        return StatusCode.OK

    # routing

    def _server_binding(self) -> RegistrarBinding | None:
        if self.conference_server is None:
            return None
        return self.lookup(self.conference_server)

    def route(self, msg: SipMessage, data: bytes, source: str) -> None:
        if msg.is_response:
            via = _via_endpoint(msg)
            if via == self.endpoint:
                return
            if via is None:
                log.warning("core: response without Via dropped")
                return
            self._log(f"{msg.status} {msg.call_id} -> {via}")
            self._send(data, via)
            return

        if msg.method is RequestType.SUBSCRIBE:
            self.handle_subscribe(msg, source)
            return

        server = self._server_binding()
        if server is not None and msg.method is not RequestType.ACK:
            if source == server.endpoint:
                if msg.method is RequestType.INVITE:
                    self.anchored.add(msg.call_id)
            elif msg.call_id in self.anchored or msg.method is RequestType.INVITE:
                self.anchored.add(msg.call_id)
                self._log(f"{msg.method.value} {msg.request_uri} via {server.uri} -> {server.endpoint}")
                self._send(data, server.endpoint)
                return

        binding = self.lookup(msg.request_uri)
        if binding is None:
            self._log(f"{msg.method.value} {msg.request_uri} -> 404")
            if msg.method is not RequestType.ACK:
                self._reply(msg, StatusCode.NOT_FOUND, source)
            return
        self._log(f"{msg.method.value} {msg.request_uri} -> {binding.endpoint}")
        self._send(data, binding.endpoint)

    # presence

    def _document(self, owner: SipUri) -> PresenceDocument | None:
        if owner not in self.provisioned:
            return None
        return self.documents.setdefault(owner, PresenceDocument(owner))

    def handle_subscribe(self, msg: SipMessage, source: str) -> None:
        doc = self._document(msg.request_uri)
        if doc is None:
            self._log(f"SUBSCRIBE {msg.request_uri} -> 404")
            self._reply(msg, StatusCode.NOT_FOUND, source)
            return
        watcher = msg.from_uri
        if msg.header("Expires") == "0":
            doc.watchers.pop(watcher, None)
            self._log(f"SUBSCRIBE {watcher} stops watching {doc.owner} -> 200")
            self._reply(msg, StatusCode.OK, source, [("Expires", "0")])
            return
        doc.watchers.setdefault(watcher, msg.call_id)
        self._notify_cseq[doc.watchers[watcher]] = max(
            self._notify_cseq.get(doc.watchers[watcher], 0), msg.cseq[0])
        self._log(f"SUBSCRIBE {watcher} watches {doc.owner} -> 200")
        self._reply(msg, StatusCode.OK, source, [("Expires", str(self.config.expiry_seconds))])

    def unsubscribe(self, owner: SipUri, watcher: SipUri) -> None:
        doc = self.documents.get(owner)
        if doc is not None:
            doc.watchers.pop(watcher, None)

    def xcap_put(self, owner: SipUri | str, tag: str, fragment: str) -> int:
        owner = SipUri.parse(owner)
        doc = self._document(owner)
        if doc is None:
            return 404
        if not is_xml_name(tag):
            return 400
        try:
            ET.fromstring(f"<{tag}>{fragment}</{tag}>")
        except ET.ParseError:
            return 400
        doc.elements[tag] = fragment
        self._log(f"XCAP PUT {owner} {tag} -> 200")
        body = doc.serialize()
        for watcher, call_id in doc.watchers.items():
            self._notify(doc.owner, watcher, call_id, body)
        return 200

    def xcap_get(self, owner: SipUri | str) -> tuple[int, str]:
        doc = self._document(SipUri.parse(owner))
        if doc is None:
            return 404, ""
        return 200, doc.serialize()

    def _notify(self, owner: SipUri, watcher: SipUri, call_id: str, body: str) -> None:
        cseq = self._notify_cseq.get(call_id, 0) + 1
        self._notify_cseq[call_id] = cseq
        notify = SipMessage.request(RequestType.NOTIFY, watcher, [
            ("Via", f"SIP/2.0/UDP {self.endpoint}"),
            ("From", f"<{owner}>"),
            ("To", f"<{watcher}>"),
            ("Call-ID", call_id),
            ("CSeq", f"{cseq} NOTIFY"),
            ("Event", "presence"),
            ("Subscription-State", "active"),
        ], body, PRESENCE_CONTENT_TYPE)
        binding = self.lookup(watcher)
        if binding is None:
            self._log(f"NOTIFY {watcher} skipped (not registered)")
            return
        self._log(f"NOTIFY {watcher} about {owner} -> {binding.endpoint}")
        self._send(serialize_message(notify), binding.endpoint)

    # contact lists

    def contact_store(self, verb: str, owner: SipUri | str, *args) -> int:
        """Apply one contact-list mutation; returns 200, 404 or 409."""
        owner = SipUri.parse(owner)
        if owner not in self.provisioned:
            return 404
        book = self.contact_books.setdefault(owner, ContactBook())
        if verb == "addContact":
            uri = SipUri.parse(args[0])
            if uri in book.contacts:
                return 409
            book.contacts.append(uri)
        elif verb == "removeContact":
            uri = SipUri.parse(args[0])
            if uri not in book.contacts:
                return 404
            book.contacts.remove(uri)
        elif verb == "newContactList":
            if args[0] in book.lists:
                return 409
            book.lists[args[0]] = []
        elif verb == "removeContactList":
            if args[0] not in book.lists:
                return 404
            del book.lists[args[0]]
        elif verb == "add":
            uri, name = SipUri.parse(args[0]), args[1]
            if name not in book.lists:
                return 404
            if uri in book.lists[name]:
                return 409
            book.lists[name].append(uri)
        elif verb == "remove":
            uri, name = SipUri.parse(args[0]), args[1]
            if name not in book.lists or uri not in book.lists[name]:
                return 404
            book.lists[name].remove(uri)
        else:
            raise ValueError(f"unknown contact verb {verb!r}")
        self._log(f"CONTACTS {owner} {verb} {' '.join(map(str, args))} -> 200")
        return 200

    def contacts_of(self, owner: SipUri | str) -> ContactBook:
        return self.contact_books.setdefault(SipUri.parse(owner), ContactBook())

    # media resource function

    def mrf_open(self, controller: SipUri | str, endpoint: str = "") -> None:
        self.mrf_channels[endpoint] = SipUri.parse(controller)

    def mrf_close(self, endpoint: str = "") -> None:
        self.mrf_channels.pop(endpoint, None)

    def mrf_execute(self, op: str, conference_uri: SipUri | str, participant_uri: SipUri | str,
                    endpoint: str | None = None) -> MrfCommand:
        """Journal one media-control command; the channel must be open."""
        if op not in ("ADD", "SUBTRACT"):
            raise ValueError(f"unknown MRF operation {op!r}")
        if (endpoint is None and not self.mrf_channels) or (
                endpoint is not None and endpoint not in self.mrf_channels):
            raise ChannelClosed("MRF control channel is not open")
        cmd = MrfCommand(op, SipUri.parse(conference_uri), SipUri.parse(participant_uri),
                         len(self.journal) + 1)
        self.journal.append(cmd)
        self._log(cmd.line())
        return cmd

    def _on_control(self, line: str, source: str) -> None:
        parts = line.split()
        if len(parts) == 3 and parts[1] in ("OPEN", "CLOSE"):
            if parts[1] == "OPEN":
                self.mrf_open(parts[2], source)
            else:
                self.mrf_close(source)
            self._send(f"MRF-ACK {parts[1]}".encode(), source)
            return
        if len(parts) == 5:
            _, ref, op, conf, participant = parts
            try:
                cmd = self.mrf_execute(op, conf, participant, source)
            except ChannelClosed:
                self._send(f"MRF-NAK {ref} ChannelClosed".encode(), source)
                return
            except ValueError as exc:
                self._send(f"MRF-NAK {ref} {exc}".encode(), source)
                return
            self._send(f"MRF-ACK {ref} {cmd.seq}".encode(), source)
            return
        log.warning("core: bad MRF control line %r", line)

    def mrf_balance(self) -> int:
        adds = sum(1 for c in self.journal if c.op == "ADD")
        return adds - (len(self.journal) - adds)

    def close(self) -> None:
        self.attachment.detach()
