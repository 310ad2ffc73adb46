"""The fluent IMS DSL.

Each verb returns a small single-use builder; nothing touches the network
until the terminal step (``to``, ``in_response_to``, ``as_``, ``do`` ...)::

    ims = Ims.simulated(config)
    alice = ims.user().has_credentials("alice", "ims.test", "pw1")
    bob = ims.user().has_credentials("bob", "ims.test", "pw2")
    bob.on_receive(RequestType.MESSAGE).do(lambda msg: print(msg.body_text))
    alice.send("Hello World").to(bob)

Python keywords get a trailing underscore (``as_``, ``from_``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

from .agent import Credentials, Transaction, UserAgent
from .config import ProvisioningConfig
from .core import CORE_ADDRESS, ImsCore, is_xml_name
from .errors import (
    AlreadyExists,
    AlreadyInitialized,
    ChannelClosed,
    ConferenceEngineNotReady,
    ConferenceExists,
    ConferenceNotFound,
    InvalidArgument,
    InvalidMessage,
    InviteFailed,
    NotFound,
    NotRegistered,
    ParticipantNotFound,
    PublishFailed,
    Timeout,
)
from .loop import EventLoop
from .sip import RequestType, SipMessage, SipUri, StatusCode
from .trace import Tracer, call_site
from .transport import InMemoryNetwork, NetworkConfig, UdpNetwork, split_address
from .xcap import DirectCoreClient, HttpCoreClient

log = logging.getLogger(__name__)

Action = Callable[[SipMessage], None]
MessageType = Union[RequestType, StatusCode]


class Ims:
    """Process-level wiring: loop, network, core address, tracer and config."""

    def __init__(self, loop: EventLoop, network, core_address: str, config: ProvisioningConfig,
                 core_client, *, tracer: Tracer | None = None, core: ImsCore | None = None,
                 agent_host: str | None = None):
        self.loop = loop
        self.network = network
        self.core_address = core_address
        self.config = config
        self.core_client = core_client
        self.tracer = tracer
        self.core = core
        self.agent_host = agent_host
        self.handles: list[UserHandle] = []

    @classmethod
    def simulated(cls, config: ProvisioningConfig, *, clock: str = "virtual", latency_ms: int = 0,
                  drop: bool = False, trace: bool = True) -> Ims:
        """An in-memory network with a built-in core."""
        loop = EventLoop(clock)
        network = InMemoryNetwork(loop, NetworkConfig("in_memory", latency_ms, drop))
        core = ImsCore(loop, network, config)
        tracer = Tracer(enabled=trace, clock=loop.time)
        return cls(loop, network, core.endpoint, config, DirectCoreClient(core),
                   tracer=tracer, core=core)

    @classmethod
    def over_udp(cls, config: ProvisioningConfig, core_address: str, *,
                 tracer: Tracer | None = None, host: str = "127.0.0.1") -> Ims:
        """Agents on real UDP sockets talking to a core in another process."""
        loop = EventLoop("real")
        network = UdpNetwork(loop)
        core_host, core_port = split_address(core_address)
        return cls(loop, network, core_address, config, HttpCoreClient(core_host, core_port),
                   tracer=tracer, agent_host=host)

    def user(self) -> UserHandle:
        return UserHandle(self)

    def server(self) -> ServerHandle:
        return ServerHandle(self)

    def run_for(self, seconds: float) -> None:
        self.loop.run_for(seconds)

    def settle(self) -> None:
        """Deliver everything already in flight without advancing time."""
        self.loop.run_idle()

    def close(self) -> None:
        for handle in self.handles:
            if handle.agent is not None:
                handle.agent.close()
        if self.core is not None:
            self.core.close()


def _uri(target) -> SipUri:
    if isinstance(target, UserHandle):
        if target.uri is None:
            raise InvalidArgument("target user has no credentials yet")
        return target.uri
    try:
        return SipUri.parse(target)
    except (ValueError, AttributeError) as exc:
        raise InvalidArgument(str(exc)) from None


@dataclass
class HandlerRule:
    """Conjunctive match conditions bound to an action; absent conditions match anything."""

    message_type: MessageType
    action: Action
    content_type: str | None = None
    body: bytes | None = None
    headers: tuple[tuple[str, str], ...] = ()
    from_uri: SipUri | None = None

    def matches(self, msg: SipMessage) -> bool:
        if isinstance(self.message_type, RequestType):
            if not msg.is_request:
                return False
            if self.message_type is not RequestType.ANY and self.message_type is not msg.method:
                return False
        else:
            if not msg.is_response:
                return False
            if self.message_type is not StatusCode.ANY_RESPONSE and self.message_type is not msg.status:
                return False
        if self.content_type is not None:
            if (msg.content_type or "").lower() != self.content_type.lower():
                return False
        if self.body is not None and msg.body != self.body:
            return False
        for name, value in self.headers:
            if value not in msg.header_values(name):
                return False
        if self.from_uri is not None and msg.from_uri != self.from_uri:
            return False
        return True


def first_match(rules: Sequence[HandlerRule], msg: SipMessage) -> int | None:
    for index, rule in enumerate(rules):
        if rule.matches(msg):
            return index
    return None


class SentRequest:
    """Token for a dispatched request; carries the Call-ID for correlation."""

    def __init__(self, tx: Transaction):
        self.transaction = tx

    @property
    def call_id(self) -> str:
        return self.transaction.call_id

    @property
    def key(self) -> str:
        return self.transaction.key

    @property
    def responses(self) -> list[SipMessage]:
        return self.transaction.responses

    @property
    def final(self) -> SipMessage | None:
        return self.transaction.final

    def wait(self, timeout: float = 6.0) -> SipMessage:
        return self.transaction.wait(timeout)


class _RequestBuilder:
    def __init__(self, user: UserHandle, method: RequestType, body: str | bytes = b"",
                 content_type: str | None = None, site: str = "send_request"):
        self._user = user
        self._method = method
        self._headers: list[tuple[str, str]] = []
        self._body = body
        self._content_type = content_type
        self._call_id: str | None = None
        self._from: SipUri | None = None
        self._site = site

    def with_header(self, name: str, value: str):
        if not name:
            raise InvalidArgument("header name must be non-empty")
        self._headers.append((name, str(value)))
        return self

    def with_content_type(self, content_type: str):
        self._content_type = content_type
        return self

    def with_body(self, body: str | bytes):
        self._body = body
        return self

    def in_dialog(self, call_id: str):
        self._call_id = call_id
        return self

    def as_user(self, uri) -> _RequestBuilder:
        self._from = _uri(uri)
        return self

    def to(self, target) -> SentRequest:
        agent = self._user._require_registered()
        with call_site(self._site):
            tx = agent.send_request(self._method, _uri(target), headers=self._headers,
                                    body=self._body, content_type=self._content_type,
                                    call_id=self._call_id, from_uri=self._from)
        return SentRequest(tx)


class _MessageBuilder(_RequestBuilder):
    def __init__(self, user: UserHandle, text: str):
        super().__init__(user, RequestType.MESSAGE, text, "text/plain", "send")


class _StatusBuilder:
    def __init__(self, user: UserHandle, code: StatusCode):
        self._user = user
        self._code = code

    def in_response_to(self, request: SipMessage) -> SipMessage:
        if self._user.agent is None:
            raise InvalidMessage("user never received that request")
        with call_site("send_status"):
            return self._user.agent.send_response(request, self._code)


class _PublishBuilder:
    def __init__(self, user: UserHandle, xml_data: str):
        self._user = user
        self._xml = xml_data

    def as_(self, tag_name: str) -> None:
        self._user._require_registered()
        if not is_xml_name(tag_name):
            raise PublishFailed(400, f"{tag_name!r} is not a valid XML element name")
        with call_site("publish"):
            status = self._user.ims.core_client.xcap_put(self._user.uri, tag_name, self._xml)
        if status != 200:
            raise PublishFailed(status)


class _ListMembershipBuilder:
    def __init__(self, user: UserHandle, verb: str, uri):
        self._user = user
        self._verb = verb
        self._uri = _uri(uri)

    def _apply(self, list_name: str) -> None:
        self._user._contacts(self._verb, str(self._uri), list_name)

    def to(self, list_name: str) -> None:
        if self._verb != "add":
            raise InvalidArgument("use from_() to remove a contact from a list")
        self._apply(list_name)

    def from_(self, list_name: str) -> None:
        if self._verb != "remove":
            raise InvalidArgument("use to() to add a contact to a list")
        self._apply(list_name)


class _RuleBuilder:
    def __init__(self, user: UserHandle, message_type: MessageType):
        self._user = user
        self._type = message_type
        self._content_type: str | None = None
        self._body: bytes | None = None
        self._headers: list[tuple[str, str]] = []
        self._from: SipUri | None = None

    def with_content_type(self, content_type: str) -> _RuleBuilder:
        self._content_type = content_type
        return self

    def with_body(self, body: str | bytes) -> _RuleBuilder:
        self._body = body.encode("utf-8") if isinstance(body, str) else bytes(body)
        return self

    def with_header(self, name: str, value: str) -> _RuleBuilder:
        self._headers.append((name, value))
        return self

    def from_(self, uri) -> _RuleBuilder:
        self._from = _uri(uri)
        return self

    def do(self, action: Action) -> HandlerRule:
        rule = HandlerRule(self._type, action, self._content_type, self._body,
                           tuple(self._headers), self._from)
        self._user.handler_rules.append(rule)
        return rule


class UserHandle:
    """A DSL user: credentials, handler rules and the agent that carries them."""

    def __init__(self, ims: Ims):
        self.ims = ims
        self.creds: Credentials | None = None
        self.uri: SipUri | None = None
        self.agent: UserAgent | None = None
        self.handler_rules: list[HandlerRule] = []
        self.received: list[SipMessage] = []
        ims.handles.append(self)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.uri}>"

    # registration

    def has_credentials(self, user_name: str, domain: str, password: str, *,
                        expiry_seconds: int | None = None, refresh: bool | None = None):
        """Register with the core; returns this handle once the core accepted it."""
        try:
            creds = Credentials(user_name, domain, password)
        except ValueError as exc:
            raise InvalidArgument(str(exc)) from None
        config = self.ims.config
        if self.agent is not None:
            self.agent.close()
        address = f"{self.ims.agent_host}:0" if self.ims.agent_host else None
        agent = UserAgent(
            self.ims.loop, self.ims.network, self.ims.core_address, creds, address=address,
            tracer=self.ims.tracer, seed=config.seed,
            expiry_seconds=expiry_seconds or config.expiry_seconds,
            refresh=config.refresh if refresh is None else refresh)
        agent.on_request = self._dispatch
        agent.on_response = self._dispatch_response
        self.creds, self.uri, self.agent = creds, creds.uri, agent
        try:
            with call_site("has_credentials"):
                agent.register()
        except Exception:
            agent.close()
            self.agent = None
            raise
        return self

    @property
    def registered(self) -> bool:
        return self.agent is not None and self.agent.registered

    def _require_registered(self) -> UserAgent:
        if self.agent is None or not self.agent.registered:
            raise NotRegistered(f"{self.uri or 'user'} is not registered")
        return self.agent

    # sending

    def send_request(self, request_type: RequestType) -> _RequestBuilder:
        if request_type is RequestType.ANY:
            raise InvalidArgument("Any is a match wildcard and cannot be sent")
        return _RequestBuilder(self, request_type)

    def send_status(self, code: StatusCode) -> _StatusBuilder:
        if code is StatusCode.ANY_RESPONSE:
            raise InvalidArgument("AnyResponse is a match wildcard and cannot be sent")
        return _StatusBuilder(self, code)

    def send(self, message: str) -> _MessageBuilder:
        return _MessageBuilder(self, message)

    # presence and contacts

    def publish(self, xml_data: str) -> _PublishBuilder:
        return _PublishBuilder(self, xml_data)

    def _contacts(self, verb: str, *args) -> None:
        self._require_registered()
        with call_site(verb):
            status = self.ims.core_client.contacts(verb, self.uri, *args)
        if status == 409:
            raise AlreadyExists(f"{verb} {' '.join(map(str, args))}")
        if status == 404:
            raise NotFound(f"{verb} {' '.join(map(str, args))}")
        if status != 200:
            raise InvalidArgument(f"{verb} rejected with {status}")

    def add_contact(self, uri) -> None:
        """Add a contact and watch its presence document."""
        target = _uri(uri)
        self._contacts("addContact", str(target))
        with call_site("addContact"):
            status = self.agent.subscribe(target)
        if status is not StatusCode.OK:
            log.warning("%s: presence subscription to %s failed with %s", self.uri, target, status)

    def remove_contact(self, uri) -> None:
        target = _uri(uri)
        self._contacts("removeContact", str(target))
        with call_site("removeContact"):
            self.agent.send_request(RequestType.SUBSCRIBE, target,
                                    headers=[("Event", "presence"), ("Expires", "0")]).wait()

    def new_contact_list(self, name: str) -> None:
        self._contacts("newContactList", name)

    def remove_contact_list(self, name: str) -> None:
        self._contacts("removeContactList", name)

    def add(self, uri) -> _ListMembershipBuilder:
        return _ListMembershipBuilder(self, "add", uri)

    def remove(self, uri) -> _ListMembershipBuilder:
        return _ListMembershipBuilder(self, "remove", uri)

    def contact_book(self) -> dict:
        return self.ims.core_client.contact_book(self.uri)

    # incoming traffic

    def on_receive(self, message_type: MessageType) -> _RuleBuilder:
        return _RuleBuilder(self, message_type)

    def on_dtmf(self) -> _RuleBuilder:
        return _RuleBuilder(self, RequestType.INFO).with_content_type(
            self.ims.config.dtmf_content_type)

    def _dispatch(self, msg: SipMessage) -> None:
        self.received.append(msg)
        index = first_match(self.handler_rules, msg)
        failed = False
        if index is not None:
            try:
                with call_site("on_receive"):
                    self.handler_rules[index].action(msg)
            except Exception:
                log.exception("%s: action for %s failed", self.uri, msg.method.value)
                failed = True
        if msg.method is RequestType.ACK or self.agent is None:
            return
        if self.agent.is_unanswered(msg):
            code = StatusCode.SERVER_ERROR if failed else StatusCode.OK
            with call_site("default_ack"):
                self.agent.send_response(msg, code)

    def _dispatch_response(self, msg: SipMessage) -> None:
        index = first_match(self.handler_rules, msg)
        if index is not None:
            try:
                with call_site("on_receive"):
                    self.handler_rules[index].action(msg)
            except Exception:
                log.exception("%s: response action failed", self.uri)

    def requests_received(self, method: RequestType | None = None) -> list[SipMessage]:
        return [m for m in self.received if m.is_request and (method is None or m.method is method)]

    def dialog_with(self, uri) -> str | None:
        return self.agent.dialogs.get(_uri(uri)) if self.agent else None


@dataclass
class ConferenceState:
    conference_uri: SipUri
    participants: list[tuple[SipUri, str]] = field(default_factory=list)
    mrf_session: str = ""

    def uris(self) -> list[SipUri]:
        return [uri for uri, _ in self.participants]


class _CreateConfBuilder:
    def __init__(self, server: ServerHandle, conference_uri):
        self._server = server
        self._uri = _uri(conference_uri)

    def with_initial_participants(self, a_uri, a_call_id: str, b_uri, b_call_id: str) -> ConferenceState:
        return self._server._create_conf(self._uri, _uri(a_uri), a_call_id, _uri(b_uri), b_call_id)

    with_initial_participant = with_initial_participants


class _UpdateConfBuilder:
    def __init__(self, server: ServerHandle, conference_uri):
        self._server = server
        self._uri = _uri(conference_uri)

    def with_new_participant(self, number) -> ConferenceState:
        return self._server._add_participant(self._uri, self._server.resolve_number(number))

    add_new_participant = with_new_participant


class ServerHandle(UserHandle):
    """A user that can bridge calls (back-to-back) and host conferences."""

    def __init__(self, ims: Ims):
        super().__init__(ims)
        self.conference_engine_ready = False
        self.conferences: dict[SipUri, ConferenceState] = {}
        self.session_info: dict[str, str] = {}
        self.leg_peer: dict[str, SipUri] = {}
        self.mrf_log: list[str] = []
        self._mrf_ref = 0
        self._mrf_replies: dict[str, str] = {}

    # media control channel

    def _on_control(self, line: str) -> None:
        parts = line.split()
        if len(parts) >= 2:
            self._mrf_replies[parts[1]] = line

    def _mrf_call(self, line: str, ref: str) -> str:
        agent = self._require_registered()
        agent.on_control = self._on_control
        agent.send_control(line)
        self.ims.loop.run_until(lambda: ref in self._mrf_replies, 5.0)
        reply = self._mrf_replies.pop(ref, None)
        if reply is None:
            raise Timeout("no answer on the MRF control channel")
        if reply.startswith("MRF-NAK"):
            raise ChannelClosed(reply)
        return reply

    def _mrf(self, op: str, conference: SipUri, participant: SipUri) -> None:
        self._mrf_ref += 1
        ref = str(self._mrf_ref)
        reply = self._mrf_call(f"MRF {ref} {op} {conference} {participant}", ref)
        self.mrf_log.append(f"MRF {reply.split()[2]} {op} {conference} {participant}")

    def supporting_conference(self) -> ServerHandle:
        if self.conference_engine_ready:
            raise AlreadyInitialized(f"conferencing already initialised for {self.uri}")
        self._mrf_call(f"MRF OPEN {self._require_registered().uri}", "OPEN")
        self.conference_engine_ready = True
        return self

    def _require_engine(self) -> None:
        if not self.conference_engine_ready:
            raise ConferenceEngineNotReady(f"call supporting_conference() on {self.uri} first")

    # conferences

    def resolve_number(self, number) -> SipUri:
        if isinstance(number, (SipUri, UserHandle)) or "@" in str(number):
            return _uri(number)
        return SipUri.short(str(number), self.ims.config.default_domain)

    def create_conf(self, conference_uri) -> _CreateConfBuilder:
        return _CreateConfBuilder(self, conference_uri)

    def update_conf(self, conference_uri) -> _UpdateConfBuilder:
        return _UpdateConfBuilder(self, conference_uri)

    retrieve_conf = update_conf

    def conference_of(self, participant) -> ConferenceState | None:
        uri = _uri(participant)
        for conf in self.conferences.values():
            if uri in conf.uris():
                return conf
        return None

    def _invite_to_conference(self, conference: SipUri, uri: SipUri,
                              call_id: str | None) -> SentRequest:
        with call_site("conference"):
            tx = self._require_registered().send_request(
                RequestType.INVITE, uri, call_id=call_id, from_uri=conference,
                headers=[("Contact", f"<{conference}>")])
        return SentRequest(tx)

    def _create_conf(self, conference: SipUri, a: SipUri, a_call_id: str, b: SipUri,
                     b_call_id: str) -> ConferenceState:
        self._require_engine()
        if conference in self.conferences:
            raise ConferenceExists(str(conference))
        if a == b:
            raise InvalidArgument("initial participants must be distinct")
        if not a_call_id or not b_call_id:
            raise InvalidArgument("both call IDs are required")
        legs = [(a, a_call_id), (b, b_call_id)]
        invites = [self._invite_to_conference(conference, uri, cid) for uri, cid in legs]
        for sent in invites:
            final = sent.wait()
            if not 200 <= final.status.code < 300:
                raise InviteFailed(final.status.code)
        state = ConferenceState(conference, [], str(conference))
        self.conferences[conference] = state
        for uri, cid in legs:
            with call_site("conference"):
                self._mrf("ADD", conference, uri)
            state.participants.append((uri, cid))
        return state

    def _add_participant(self, conference: SipUri, uri: SipUri) -> ConferenceState:
        self._require_engine()
        state = self.conferences.get(conference)
        if state is None:
            raise ConferenceNotFound(str(conference))
        if uri in state.uris():
            raise InvalidArgument(f"{uri} is already in {conference}")
        sent = self._invite_to_conference(conference, uri, None)
        final = sent.wait()
        if not 200 <= final.status.code < 300:
            raise InviteFailed(final.status.code)
        state.participants.append((uri, sent.call_id))
        with call_site("conference"):
            self._mrf("ADD", conference, uri)
        return state

    def remove_participant(self, participant) -> None:
        """Detach a participant; a conference left with fewer than two is torn down."""
        self._require_engine()
        uri = _uri(participant)
        state = self.conference_of(uri)
        if state is None:
            raise ParticipantNotFound(str(uri))
        state.participants = [(u, c) for u, c in state.participants if u != uri]
        with call_site("remove_participant"):
            self._mrf("SUBTRACT", state.conference_uri, uri)
            if len(state.participants) < 2:
                for other, call_id in state.participants:
                    builder = self.send_request(RequestType.BYE).in_dialog(call_id) \
                        .as_user(state.conference_uri)
                    builder._site = "remove_participant"
                    builder.to(other).wait()
                    self._mrf("SUBTRACT", state.conference_uri, other)
                state.participants = []
                del self.conferences[state.conference_uri]

    # back-to-back calls

    def get_forward_call_id(self, call_id: str) -> str | None:
        return self.session_info.get(call_id)

    def bridge_call(self, invite: SipMessage) -> str:
        """Originate the far leg for ``invite`` and answer the near leg once it connects."""
        agent = self._require_registered()
        if not invite.is_request or invite.method is not RequestType.INVITE:
            raise InvalidArgument("bridge_call needs an incoming INVITE")
        with call_site("bridge_call"):
            far = agent.send_request(RequestType.INVITE, invite.request_uri,
                                     from_uri=invite.from_uri)
            final = far.wait()
            code = final.status
            if not 200 <= code.code < 300:
                agent.send_response(invite, code if code.is_final else StatusCode.SERVER_ERROR)
                raise InviteFailed(code.code)
            near_id, far_id = invite.call_id, far.call_id
            self.session_info[near_id] = far_id
            self.session_info[far_id] = near_id
            self.leg_peer[near_id] = invite.from_uri
            self.leg_peer[far_id] = invite.request_uri
            agent.send_response(invite, StatusCode.OK)
        return far_id

    def release_call(self, call_id: str) -> None:
        """Hang up the other leg of a bridged call whose ``call_id`` leg ended."""
        other = self.session_info.pop(call_id, None)
        self.leg_peer.pop(call_id, None)
        if other is None:
            return
        self.session_info.pop(other, None)
        peer = self.leg_peer.pop(other, None)
        if peer is not None:
            builder = self.send_request(RequestType.BYE).in_dialog(other)
            builder._site = "release_call"
            builder.to(peer).wait()
