"""SIP message model and textual codec (the RFC 3261 subset the DSL needs)."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace

from .errors import InvalidMessage, MalformedMessage

__all__ = [
    "MANDATORY_HEADERS",
    "RequestType",
    "SipMessage",
    "SipUri",
    "StatusCode",
    "canonical_header_name",
    "make_response",
    "parse_message",
    "serialize_message",
    "transaction_key",
]

SIP_VERSION = "SIP/2.0"
MANDATORY_HEADERS = ("Via", "From", "To", "Call-ID", "CSeq")

_SPECIAL_NAMES = {
    "call-id": "Call-ID",
    "cseq": "CSeq",
    "www-authenticate": "WWW-Authenticate",
    "mime-version": "MIME-Version",
}


def canonical_header_name(name: str) -> str:
    """Fold a header name to its canonical spelling (``call-id`` -> ``Call-ID``)."""
    name = name.strip()
    if not name:
        raise MalformedMessage("empty header name")
    lower = name.lower()
    if lower in _SPECIAL_NAMES:
        return _SPECIAL_NAMES[lower]
    return "-".join(part[:1].upper() + part[1:].lower() for part in lower.split("-"))


@dataclass(frozen=True)
class SipUri:
    user: str
    domain: str
    scheme: str = "sip"

    def __post_init__(self):
        if not self.user or not self.domain:
            raise ValueError("SIP URI needs a user and a domain")
        if "@" in self.domain or re.search(r"\s", self.domain):
            raise ValueError(f"invalid SIP URI domain {self.domain!r}")
        if re.search(r"\s", self.user) or "@" in self.user:
            raise ValueError(f"invalid SIP URI user {self.user!r}")
        if self.scheme != "sip":
            raise ValueError("only the sip scheme is supported")

    @classmethod
    def parse(cls, text: str | SipUri) -> SipUri:
        """Accept ``sip:user@domain``, ``user@domain`` or a bracketed name-addr."""
        if isinstance(text, SipUri):
            return text
        value = text.strip()
        if "<" in value:
            m = re.search(r"<([^>]*)>", value)
            if not m:
                raise ValueError(f"unterminated name-addr {text!r}")
            value = m.group(1)
        value = value.split(";", 1)[0]
        if value.lower().startswith("sip:"):
            value = value[4:]
        user, sep, domain = value.partition("@")
        if not sep:
            raise ValueError(f"not a SIP URI: {text!r}")
        return cls(user, domain)

    @classmethod
    def short(cls, number: str, domain: str) -> SipUri:
        return cls(number, domain)

    def __str__(self) -> str:
        return f"{self.scheme}:{self.user}@{self.domain}"


class RequestType(enum.Enum):
    ANY = "ANY"
    REGISTER = "REGISTER"
    INVITE = "INVITE"
    ACK = "ACK"
    BYE = "BYE"
    CANCEL = "CANCEL"
    MESSAGE = "MESSAGE"
    INFO = "INFO"
    SUBSCRIBE = "SUBSCRIBE"
    NOTIFY = "NOTIFY"
    PUBLISH = "PUBLISH"

    @classmethod
    def from_name(cls, name: str) -> RequestType:
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown request type {name!r}") from None


class StatusCode(enum.Enum):
    ANY_RESPONSE = (0, "")
    TRYING = (100, "Trying")
    RINGING = (180, "Ringing")
    OK = (200, "OK")
    FORBIDDEN = (403, "Forbidden")
    NOT_FOUND = (404, "Not Found")
    REQUEST_TIMEOUT = (408, "Request Timeout")
    SERVER_ERROR = (500, "Server Internal Error")

    @property
    def code(self) -> int:
        return self.value[0]

    @property
    def reason(self) -> str:
        return self.value[1]

    @property
    def is_final(self) -> bool:
        return self.code >= 200

    @classmethod
    def from_code(cls, code: int) -> StatusCode:
        for member in cls:
            if member.code == code and member is not cls.ANY_RESPONSE:
                return member
        raise ValueError(f"unsupported status code {code}")

    @classmethod
    def from_name(cls, name: str) -> StatusCode:
        key = re.sub(r"(?<=[a-z])(?=[A-Z])", "_", name).upper()
        aliases = {"ANYRESPONSE": "ANY_RESPONSE", "NOTFOUND": "NOT_FOUND",
                   "REQUESTTIMEOUT": "REQUEST_TIMEOUT", "SERVERERROR": "SERVER_ERROR"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown status code {name!r}") from None

    def __str__(self) -> str:
        return f"{self.code} {self.reason}"


@dataclass(frozen=True)
class SipMessage:
    """A SIP request or response.

    ``headers`` holds every header except Content-Length, which is derived
    from ``body`` and always written last.
    """

    kind: str
    method: RequestType
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    status: StatusCode | None = None
    request_uri: SipUri | None = None

    def __post_init__(self):
        object.__setattr__(
            self,
            "headers",
            tuple((canonical_header_name(n), str(v).strip()) for n, v in self.headers
                  if canonical_header_name(n) != "Content-Length"),
        )

    @classmethod
    def request(cls, method: RequestType, request_uri: SipUri | str,
                headers=(), body: bytes | str = b"", content_type: str | None = None) -> SipMessage:
        headers = list(headers)
        if content_type is not None:
            headers = [(n, v) for n, v in headers if canonical_header_name(n) != "Content-Type"]
            headers.append(("Content-Type", content_type))
        if isinstance(body, str):
            body = body.encode("utf-8")
        return cls("request", method, tuple(headers), body, None, SipUri.parse(request_uri))

    @property
    def is_request(self) -> bool:
        return self.kind == "request"

    @property
    def is_response(self) -> bool:
        return self.kind == "response"

    def header(self, name: str) -> str | None:
        """First value of ``name`` (case-insensitive), or None."""
        name = canonical_header_name(name)
        if name == "Content-Length":
            return str(len(self.body))
        for key, value in self.headers:
            if key == name:
                return value
        return None

    def header_values(self, name: str) -> list[str]:
        name = canonical_header_name(name)
        return [v for k, v in self.headers if k == name]

    def with_header(self, name: str, value: str, *, replace_existing: bool = True) -> SipMessage:
        name = canonical_header_name(name)
        headers = list(self.headers)
        if replace_existing and any(k == name for k, _ in headers):
            idx = next(i for i, (k, _) in enumerate(headers) if k == name)
            headers[idx] = (name, value)
            headers = [h for i, h in enumerate(headers) if i == idx or h[0] != name]
        else:
            headers.append((name, value))
        return replace(self, headers=tuple(headers))

    @property
    def content_type(self) -> str | None:
        return self.header("Content-Type")

    @property
    def call_id(self) -> str | None:
        return self.header("Call-ID")

    @property
    def cseq(self) -> tuple[int, str]:
        number, _, method = (self.header("CSeq") or "").partition(" ")
        return int(number), method.strip()

    @property
    def body_text(self) -> str:
        return self.body.decode("utf-8", errors="replace")

    @property
    def from_uri(self) -> SipUri | None:
        value = self.header("From")
        return SipUri.parse(value) if value else None

    @property
    def to_uri(self) -> SipUri | None:
        value = self.header("To")
        return SipUri.parse(value) if value else None

    # accessors named after the data access style used by application code
    def get_rtype(self) -> RequestType:
        return self.method

    def get_header(self, name: str) -> str | None:
        return self.header(name)

    def get_body(self) -> str:
        return self.body_text

    def get_receiver_uri(self) -> str:
        uri = self.request_uri if self.request_uri is not None else self.to_uri
        return f"{uri.user}@{uri.domain}" if uri else ""

    def __bytes__(self) -> bytes:
        return serialize_message(self)


def _check(msg: SipMessage) -> None:
    if msg.kind not in ("request", "response"):
        raise InvalidMessage(f"unknown message kind {msg.kind!r}")
    if msg.method is RequestType.ANY:
        raise InvalidMessage("the Any wildcard cannot be serialized")
    if msg.is_request:
        if msg.request_uri is None or msg.status is not None:
            raise InvalidMessage("a request needs a request URI and no status")
    else:
        if msg.status is None or msg.request_uri is not None:
            raise InvalidMessage("a response needs a status and no request URI")
        if msg.status is StatusCode.ANY_RESPONSE:
            raise InvalidMessage("the AnyResponse wildcard cannot be serialized")
    names = {k for k, _ in msg.headers}
    missing = [h for h in MANDATORY_HEADERS if h not in names]
    if missing:
        raise InvalidMessage(f"missing mandatory headers: {', '.join(missing)}")


def serialize_message(msg: SipMessage) -> bytes:
    _check(msg)
    if msg.is_request:
        start = f"{msg.method.value} {msg.request_uri} {SIP_VERSION}"
    else:
        start = f"{SIP_VERSION} {msg.status.code} {msg.status.reason}"
    lines = [start]
    lines.extend(f"{name}: {value}" for name, value in msg.headers)
    lines.append(f"Content-Length: {len(msg.body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + msg.body


_HEAD_END = re.compile(rb"\r?\n\r?\n")


def parse_message(raw: bytes) -> SipMessage:
    """Parse one datagram-framed SIP message. Bare LF line endings are accepted."""
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    m = _HEAD_END.search(raw)
    if m is None:
        raise MalformedMessage("no blank line terminating the headers")
    head, body = raw[: m.start()], raw[m.end():]
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedMessage(f"header section is not UTF-8: {exc}") from None
    lines = text.replace("\r\n", "\n").split("\n")
    start = lines[0].strip()
    parts = start.split(" ", 2)
    if len(parts) != 3:
        raise MalformedMessage(f"bad start line {start!r}")

    headers: list[tuple[str, str]] = []
    content_length = None
    for line in lines[1:]:
        if line[:1] in (" ", "\t") and headers:
            name, value = headers[-1]
            headers[-1] = (name, f"{value} {line.strip()}")
            continue
        name, sep, value = line.partition(":")
        if not sep or not name.strip():
            raise MalformedMessage(f"bad header line {line!r}")
        name = canonical_header_name(name)
        if name == "Content-Length":
            try:
                content_length = int(value.strip())
            except ValueError:
                raise MalformedMessage(f"bad Content-Length {value.strip()!r}") from None
            continue
        headers.append((name, value.strip()))

    if content_length is not None:
        if content_length > len(body):
            raise MalformedMessage(
                f"Content-Length {content_length} exceeds body of {len(body)} bytes")
        if content_length < len(body) and body[content_length:].strip(b"\r\n"):
            raise MalformedMessage(
                f"Content-Length {content_length} does not match body of {len(body)} bytes")
        body = body[:content_length]

    names = {n for n, _ in headers}
    missing = [h for h in MANDATORY_HEADERS if h not in names]
    if missing:
        raise MalformedMessage(f"missing mandatory headers: {', '.join(missing)}")
    cseq = next(v for n, v in headers if n == "CSeq")
    cseq_num, _, cseq_method = cseq.partition(" ")
    if not cseq_num.isdigit() or not cseq_method.strip():
        raise MalformedMessage(f"bad CSeq {cseq!r}")
    cseq_method = cseq_method.strip().upper()

    if parts[0] == SIP_VERSION:
        try:
            status = StatusCode.from_code(int(parts[1]))
        except ValueError:
            raise MalformedMessage(f"unsupported status {parts[1]!r}") from None
        method = _method(cseq_method)
        return SipMessage("response", method, tuple(headers), body, status, None)

    if parts[2] != SIP_VERSION:
        raise MalformedMessage(f"unsupported version {parts[2]!r}")
    method = _method(parts[0])
    if method.value != cseq_method:
        raise MalformedMessage(f"CSeq method {cseq_method} does not match {method.value}")
    try:
        uri = SipUri.parse(parts[1])
    except ValueError as exc:
        raise MalformedMessage(str(exc)) from None
    return SipMessage("request", method, tuple(headers), body, None, uri)


def _method(name: str) -> RequestType:
    if name == RequestType.ANY.value:
        raise MalformedMessage("ANY is not a SIP method")
    try:
        return RequestType(name)
    except ValueError:
        raise MalformedMessage(f"unknown method {name!r}") from None


def make_response(request: SipMessage, code: StatusCode) -> SipMessage:
    """Build the response to ``request``, copying its dialog-identifying headers."""
    if not request.is_request:
        raise InvalidMessage("cannot respond to a response")
    if code is StatusCode.ANY_RESPONSE:
        raise InvalidMessage("the AnyResponse wildcard cannot be sent")
    copied = tuple((n, v) for n, v in request.headers if n in MANDATORY_HEADERS)
    return SipMessage("response", request.method, copied, b"", code, None)


def transaction_key(msg: SipMessage) -> str:
    return f"{msg.header('Call-ID')}|{msg.header('CSeq')}"
