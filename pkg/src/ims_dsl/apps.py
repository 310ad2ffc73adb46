"""Ready-made actions for conference servers.

These are application code built from DSL primitives, shared by embedded
programs and by scripts (the interpreter exposes them as named actions).
"""

from __future__ import annotations

import logging
import re

from .dsl import ServerHandle
from .errors import ImsError
from .sip import RequestType, SipMessage, SipUri, StatusCode

log = logging.getLogger(__name__)

DIAL_PATTERN = re.compile(r".*#\d{10,}#.*")
_NUMBER = re.compile(r"#(\d{10,})#")
_SIGNAL = re.compile(r"Signal\s*=\s*([0-9A-Da-d#*])")


def dtmf_digit(body: str) -> str:
    """Extract the key from an ``application/dtmf-relay`` body (``Signal=5``)."""
    m = _SIGNAL.search(body)
    if m:
        return m.group(1)
    return body.strip()[:1]


class DtmfConference:
    """Turn a bridged call into a conference when a party dials ``#<number>#``.

    Each DTMF INFO is acknowledged immediately and its digit buffered. Once
    the buffer holds ``#`` followed by at least ten digits and ``#``, the
    two legs of the call are moved onto the conference bridge (the other
    leg's call-ID comes from the server's forward map) and the dialed
    number is invited.
    """

    def __init__(self, server: ServerHandle, conference_uri: SipUri | str | None = None,
                 domain: str | None = None):
        self.server = server
        self._conference_uri = conference_uri
        self.domain = domain
        self.buffer = ""

    @property
    def conference_uri(self) -> SipUri:
        return SipUri.parse(self._conference_uri) if self._conference_uri else self.server.uri

    def __call__(self, request: SipMessage) -> None:
        self.server.send_status(StatusCode.OK).in_response_to(request)
        if request.method is not RequestType.INFO:
            return
        self.buffer += dtmf_digit(request.body_text)
        if not DIAL_PATTERN.match(self.buffer):
            return
        conference = self.conference_uri
        receiver = f"{conference.user}@{conference.domain}"
        if request.get_receiver_uri() != receiver and conference not in self.server.conferences:
            from_call_id = request.call_id
            to_call_id = self.server.get_forward_call_id(from_call_id)
            self.server.create_conf(conference).with_initial_participants(
                request.header("From"), from_call_id, request.header("To"), to_call_id)
        number = _NUMBER.search(self.buffer).group(1)
        joining = SipUri.short(number, self.domain or self.server.ims.config.default_domain)
        self.buffer = ""
        self.server.retrieve_conf(conference).add_new_participant(joining)


def bridge(server: ServerHandle):
    """Action: bridge every incoming INVITE back-to-back."""
    def action(request: SipMessage) -> None:
        try:
            server.bridge_call(request)
        except ImsError as exc:
            log.info("%s: bridging failed: %s", server.uri, exc)
    return action


def hang_up(server: ServerHandle):
    """Action for BYE: leave the conference, or release the other leg of a bridged call."""
    def action(request: SipMessage) -> None:
        if request.method is RequestType.BYE:
            sender = request.from_uri
            if server.conference_engine_ready and server.conference_of(sender) is not None:
                server.remove_participant(sender)
            else:
                server.release_call(request.call_id)
        server.send_status(StatusCode.OK).in_response_to(request)
    return action


def install_conference_server(server: ServerHandle) -> DtmfConference:
    """Wire a server handle with bridging, DTMF conferencing and hang-up handling."""
    collector = DtmfConference(server)
    server.on_receive(RequestType.INVITE).do(bridge(server))
    server.on_dtmf().do(collector)
    server.on_receive(RequestType.BYE).do(hang_up(server))
    return collector
