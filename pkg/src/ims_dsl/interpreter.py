"""Parser and executor for textual DSL scripts (``.ims`` files).

One statement per line, a subject followed by a verb chain::

    alice hasCredentials("alice", "ims.test", "pw1")
    bob onReceive Message withContentType "text/plain" Do ack
    alice send "Hello World" to "sip:bob@ims.test"

``//`` starts a comment, a trailing backslash continues a statement on the
next line, and ``action <name> ... end`` defines a named block usable after
``Do``. Inside an action body the name ``incoming`` is bound to the message
that triggered it.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Union

from .dsl import Ims, ServerHandle, UserHandle
from .errors import ImsError, ScriptRuntimeError, ScriptSyntaxError, UnknownBinding
from .sip import RequestType, SipMessage, SipUri, StatusCode

log = logging.getLogger(__name__)

KEYWORDS = frozenset({
    "hasCredentials", "sendRequest", "sendStatus", "inResponseTo", "send", "withContentType",
    "withHeader", "withBody", "to", "from", "publish", "as", "addContact", "removeContact",
    "newContactList", "removeContactList", "add", "remove", "onReceive", "onDtmf", "Do",
    "supportingConference", "createConf", "withInitialParticipant", "withInitialParticipants",
    "updateConf", "withNewParticipant", "removeParticipant", "retrieveConf", "addNewParticipant",
    "action", "end",
})
SERVER_VERBS = frozenset({"supportingConference", "createConf", "updateConf", "retrieveConf",
                          "removeParticipant"})
INCOMING = "incoming"


@dataclass(frozen=True)
class Token:
    kind: str  # name, string, number, punct
    value: str
    line: int

    def text(self) -> str:
        if self.kind == "string":
            return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return self.value


@dataclass(frozen=True)
class Arg:
    kind: str  # string, name, number
    value: str

    def text(self) -> str:
        return Token(self.kind, self.value, 0).text()


@dataclass
class Statement:
    subject: str
    chain: list[tuple[str, list[Arg]]]
    line: int

    @property
    def verb(self) -> str:
        return self.chain[0][0]

    def clause(self, keyword: str) -> list[Arg] | None:
        for kw, args in self.chain:
            if kw == keyword:
                return args
        return None

    def clauses(self, keyword: str) -> list[list[Arg]]:
        return [args for kw, args in self.chain if kw == keyword]


@dataclass
class ActionDef:
    name: str
    body: list[Statement]
    line: int


Script = list[Union[Statement, ActionDef]]

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[(),])
  | (?P<number>\d+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)


def _unescape(raw: str, line: int) -> str:
    out = []
    i = 0
    while i < len(raw):
        ch = raw[i]
        if ch == "\\":
            nxt = raw[i + 1:i + 2]
            if nxt not in ('"', "\\"):
                raise ScriptSyntaxError(line, 'escape \\" or \\\\', f"\\{nxt}")
            out.append(nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _logical_lines(text: str) -> list[tuple[int, str]]:
    lines: list[tuple[int, str]] = []
    pending: tuple[int, str] | None = None
    for number, raw in enumerate(text.replace("\r\n", "\n").split("\n"), start=1):
        stripped = raw.rstrip()
        if pending is not None:
            start, acc = pending
            stripped = acc + " " + stripped
            number = start
        if stripped.endswith("\\") and not stripped.endswith("\\\\"):
            pending = (number, stripped[:-1])
            continue
        pending = None
        lines.append((number, stripped))
    if pending is not None:
        lines.append(pending)
    return lines


def tokenize_line(text: str, line: int) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            found = text[pos:pos + 10]
            expected = "closing quote" if text[pos] == '"' else "a token"
            raise ScriptSyntaxError(line, expected, repr(found))
        kind = m.lastgroup
        pos = m.end()
        if kind in ("ws", "comment"):
            continue
        value = m.group()
        if kind == "string":
            value = _unescape(value[1:-1], line)
        tokens.append(Token(kind, value, line))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token], line: int):
        self.tokens = tokens
        self.pos = 0
        self.line = line

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _found(self) -> str:
        tok = self.peek()
        return "end of line" if tok is None else repr(tok.text())

    def at(self, keyword: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "name" and tok.value == keyword

    def keyword(self, keyword: str) -> str:
        if not self.at(keyword):
            raise ScriptSyntaxError(self.line, f"'{keyword}'", self._found())
        self.pos += 1
        return keyword

    def punct(self, char: str) -> None:
        tok = self.peek()
        if tok is None or tok.kind != "punct" or tok.value != char:
            raise ScriptSyntaxError(self.line, f"'{char}'", self._found())
        self.pos += 1

    def value(self, what: str = "a value") -> Arg:
        tok = self.peek()
        if tok is None or tok.kind == "punct" or (tok.kind == "name" and tok.value in KEYWORDS):
            raise ScriptSyntaxError(self.line, what, self._found())
        self.pos += 1
        return Arg(tok.kind, tok.value)

    def name(self, what: str) -> Arg:
        tok = self.peek()
        if tok is None or tok.kind != "name" or tok.value in KEYWORDS:
            raise ScriptSyntaxError(self.line, what, self._found())
        self.pos += 1
        return Arg("name", tok.value)

    def done(self) -> None:
        if self.peek() is not None:
            raise ScriptSyntaxError(self.line, "end of statement", self._found())

    # clause helpers

    def paren_args(self, count: int) -> list[Arg]:
        self.punct("(")
        args = [self.value()]
        for _ in range(count - 1):
            self.punct(",")
            args.append(self.value())
        self.punct(")")
        return args

    def optional(self, chain, keyword: str) -> None:
        if self.at(keyword):
            self.pos += 1
            chain.append((keyword, [self.value()]))

    def headers(self, chain) -> None:
        while self.at("withHeader"):
            self.pos += 1
            chain.append(("withHeader", self.paren_args(2)))

    def simple(self, chain, keyword: str, count: int = 1, what: str = "a value") -> None:
        self.keyword(keyword)
        chain.append((keyword, [self.value(what) for _ in range(count)]))


def _parse_chain(p: _Parser) -> list[tuple[str, list[Arg]]]:
    tok = p.peek()
    if tok is None or tok.kind != "name" or tok.value not in KEYWORDS:
        raise ScriptSyntaxError(p.line, "a DSL verb", p._found())
    verb = tok.value
    p.pos += 1
    chain: list[tuple[str, list[Arg]]] = []
    if verb == "hasCredentials":
        chain.append((verb, p.paren_args(3)))
    elif verb == "sendRequest":
        chain.append((verb, [p.value("a request type")]))
        p.optional(chain, "withContentType")
        p.optional(chain, "withBody")
        p.headers(chain)
        p.simple(chain, "to", what="a SIP URI")
    elif verb == "sendStatus":
        chain.append((verb, [p.value("a status code")]))
        p.simple(chain, "inResponseTo", what="an incoming request")
    elif verb == "send":
        chain.append((verb, [p.value("a message")]))
        p.optional(chain, "withContentType")
        p.headers(chain)
        p.simple(chain, "to", what="a SIP URI")
    elif verb == "publish":
        chain.append((verb, [p.value("XML data")]))
        p.simple(chain, "as", what="a tag name")
    elif verb in ("addContact", "removeContact", "newContactList", "removeContactList",
                  "removeParticipant"):
        chain.append((verb, [p.value()]))
    elif verb == "add":
        chain.append((verb, [p.value("a SIP URI")]))
        p.simple(chain, "to", what="a list name")
    elif verb == "remove":
        chain.append((verb, [p.value("a SIP URI")]))
        p.simple(chain, "from", what="a list name")
    elif verb == "onReceive":
        chain.append((verb, [p.value("a message type")]))
        p.optional(chain, "withContentType")
        p.optional(chain, "withBody")
        p.headers(chain)
        p.optional(chain, "from")
        p.keyword("Do")
        chain.append(("Do", [p.name("an action name")]))
    elif verb == "onDtmf":
        chain.append((verb, []))
        p.keyword("Do")
        chain.append(("Do", [p.name("an action name")]))
    elif verb == "supportingConference":
        chain.append((verb, []))
    elif verb == "createConf":
        chain.append((verb, [p.value("a conference URI")]))
        if p.at("withInitialParticipant"):
            p.simple(chain, "withInitialParticipant", 4)
        else:
            p.simple(chain, "withInitialParticipants", 4)
    elif verb == "updateConf":
        chain.append((verb, [p.value("a conference URI")]))
        p.simple(chain, "withNewParticipant", what="a participant number")
    elif verb == "retrieveConf":
        chain.append((verb, [p.value("a conference URI")]))
        p.simple(chain, "addNewParticipant", what="a participant URI")
    else:
        raise ScriptSyntaxError(p.line, "a DSL verb", repr(verb))
    p.done()
    return chain


def parse_script(text: str) -> Script:
    """Parse script text into statements and action definitions."""
    result: Script = []
    current: ActionDef | None = None
    for line, raw in _logical_lines(text):
        tokens = tokenize_line(raw, line)
        if not tokens:
            continue
        head = tokens[0]
        if head.kind == "name" and head.value == "action":
            if current is not None:
                raise ScriptSyntaxError(line, "'end' before a new action", "'action'")
            p = _Parser(tokens[1:], line)
            name = p.name("an action name")
            p.done()
            current = ActionDef(name.value, [], line)
            continue
        if head.kind == "name" and head.value == "end":
            if current is None or len(tokens) > 1:
                raise ScriptSyntaxError(line, "a statement", "'end'")
            result.append(current)
            current = None
            continue
        if head.kind != "name" or head.value in KEYWORDS:
            raise ScriptSyntaxError(line, "a subject name", repr(head.text()))
        p = _Parser(tokens[1:], line)
        statement = Statement(head.value, _parse_chain(p), line)
        (current.body if current is not None else result).append(statement)
    if current is not None:
        raise ScriptSyntaxError(current.line, "'end'", "end of file")
    return result


def unparse(item: Statement | ActionDef) -> str:
    if isinstance(item, ActionDef):
        body = "\n".join("    " + unparse(s) for s in item.body)
        return f"action {item.name}\n{body}\nend" if body else f"action {item.name}\nend"
    parts = [item.subject]
    for keyword, args in item.chain:
        if keyword in ("hasCredentials", "withHeader"):
            parts.append(keyword + "(" + ", ".join(a.text() for a in args) + ")")
        else:
            parts.append(" ".join([keyword] + [a.text() for a in args]))
    return " ".join(parts)


# execution

ActionFactory = Callable[["UserHandle", "Environment"], Callable[[SipMessage], None]]


@dataclass
class Environment:
    """Interpreter state: name bindings, named actions and the running deployment."""

    ims: Ims
    bindings: dict[str, UserHandle] = field(default_factory=dict)
    actions: dict[str, ActionFactory | ActionDef] = field(default_factory=dict)
    incoming: SipMessage | None = None
    log: list[str] = field(default_factory=list)
    results: list[object] = field(default_factory=list)

    def __post_init__(self):
        for name, factory in builtin_actions().items():
            self.actions.setdefault(name, factory)

    def register_action(self, name: str, factory: ActionFactory) -> None:
        if name == INCOMING:
            raise ValueError("'incoming' is reserved")
        self.actions[name] = factory


def builtin_actions() -> dict[str, ActionFactory]:
    from . import apps

    def ack(handle, env):
        return lambda msg: handle.send_status(StatusCode.OK).in_response_to(msg)

    def log_action(handle, env):
        def action(msg):
            what = msg.method.value if msg.is_request else str(msg.status)
            line = f"{handle.uri} received {what} from {msg.from_uri}"
            env.log.append(line)
            log.info(line)
        return action

    def server_only(fn):
        def factory(handle, env):
            if not isinstance(handle, ServerHandle):
                raise ImsError("this action needs a server subject")
            return fn(handle)
        return factory

    return {
        "ack": ack,
        "log": log_action,
        "bridge": server_only(apps.bridge),
        "hangUp": server_only(apps.hang_up),
        "dtmfConference": server_only(apps.DtmfConference),
    }


def _looks_like_uri(text: str) -> bool:
    return text.lower().startswith("sip:") or re.fullmatch(r"[^\s@]+@[^\s@]+", text) is not None


class Interpreter:
    def __init__(self, env: Environment):
        self.env = env

    def _binding(self, name: str, line: int) -> UserHandle:
        handle = self.env.bindings.get(name)
        if handle is None:
            raise UnknownBinding(name, line)
        return handle

    def _text(self, arg: Arg, line: int) -> str:
        if arg.kind == "name":
            raise UnknownBinding(arg.value, line)
        return arg.value

    @staticmethod
    def _word(arg: Arg) -> str:
        """Enum-like positions (request types, status codes) accept bare names."""
        return arg.value

    def _uri(self, arg: Arg, line: int) -> SipUri:
        if arg.kind == "name":
            return self._binding(arg.value, line).uri
        return SipUri.parse(arg.value)

    def _participant(self, arg: Arg, line: int):
        if arg.kind == "name":
            return self._binding(arg.value, line).uri
        if _looks_like_uri(arg.value):
            return SipUri.parse(arg.value)
        return arg.value

    def _incoming(self, arg: Arg, line: int) -> SipMessage:
        if arg.kind == "name" and arg.value == INCOMING:
            if self.env.incoming is None:
                raise UnknownBinding(INCOMING, line)
            return self.env.incoming
        raise UnknownBinding(arg.value, line)

    def _action(self, name: str, handle: UserHandle, line: int):
        entry = self.env.actions.get(name)
        if entry is None:
            raise UnknownBinding(name, line)
        if isinstance(entry, ActionDef):
            return self._script_action(entry)
        return entry(handle, self.env)

    def _script_action(self, definition: ActionDef):
        def action(msg: SipMessage) -> None:
            saved = self.env.incoming
            self.env.incoming = msg
            try:
                for statement in definition.body:
                    self.run_statement(statement)
            finally:
                self.env.incoming = saved
        return action

    def run(self, script: Script, server_subjects: set[str] | None = None) -> Environment:
        servers = server_subjects if server_subjects is not None else _server_subjects(script)
        self._servers = servers
        for item in script:
            if isinstance(item, ActionDef):
                self.env.actions[item.name] = item
            else:
                self.run_statement(item)
        return self.env

    def run_statement(self, st: Statement) -> None:
        try:
            result = self._execute(st)
        except (UnknownBinding, ScriptRuntimeError):
            raise
        except (ImsError, ValueError) as exc:
            raise ScriptRuntimeError(st.line, exc) from exc
        self.env.results.append(result)

    def _execute(self, st: Statement):
        verb, args = st.chain[0]
        line = st.line
        if verb == "hasCredentials":
            if st.subject == INCOMING:
                raise UnknownBinding(INCOMING, line)
            servers = getattr(self, "_servers", set())
            handle = self.env.bindings.get(st.subject)
            if handle is None:
                handle = self.env.ims.server() if st.subject in servers else self.env.ims.user()
            user, domain, password = (self._text(a, line) for a in args)
            handle.has_credentials(user, domain, password)
            self.env.bindings[st.subject] = handle
            return handle

        handle = self._binding(st.subject, line)
        if verb == "sendRequest":
            builder = handle.send_request(RequestType.from_name(self._word(args[0])))
            if (ct := st.clause("withContentType")) is not None:
                builder.with_content_type(self._text(ct[0], line))
            if (body := st.clause("withBody")) is not None:
                builder.with_body(self._text(body[0], line))
            for name, value in st.clauses("withHeader"):
                builder.with_header(self._text(name, line), self._text(value, line))
            sent = builder.to(self._uri(st.clause("to")[0], line))
            sent.wait()
            return sent
        if verb == "sendStatus":
            code = StatusCode.from_name(self._word(args[0]))
            return handle.send_status(code).in_response_to(
                self._incoming(st.clause("inResponseTo")[0], line))
        if verb == "send":
            builder = handle.send(self._text(args[0], line))
            if (ct := st.clause("withContentType")) is not None:
                builder.with_content_type(self._text(ct[0], line))
            for name, value in st.clauses("withHeader"):
                builder.with_header(self._text(name, line), self._text(value, line))
            sent = builder.to(self._uri(st.clause("to")[0], line))
            sent.wait()
            return sent
        if verb == "publish":
            tag = st.clause("as")[0]
            return handle.publish(self._text(args[0], line)).as_(tag.value)
        if verb == "addContact":
            return handle.add_contact(self._uri(args[0], line))
        if verb == "removeContact":
            return handle.remove_contact(self._uri(args[0], line))
        if verb == "newContactList":
            return handle.new_contact_list(args[0].value)
        if verb == "removeContactList":
            return handle.remove_contact_list(args[0].value)
        if verb == "add":
            return handle.add(self._uri(args[0], line)).to(st.clause("to")[0].value)
        if verb == "remove":
            return handle.remove(self._uri(args[0], line)).from_(st.clause("from")[0].value)
        if verb in ("onReceive", "onDtmf"):
            if verb == "onDtmf":
                builder = handle.on_dtmf()
            else:
                builder = handle.on_receive(_message_type(self._word(args[0])))
                if (ct := st.clause("withContentType")) is not None:
                    builder.with_content_type(self._text(ct[0], line))
                if (body := st.clause("withBody")) is not None:
                    builder.with_body(self._text(body[0], line))
                for name, value in st.clauses("withHeader"):
                    builder.with_header(self._text(name, line), self._text(value, line))
                if (sender := st.clause("from")) is not None:
                    builder.from_(self._uri(sender[0], line))
            action = self._action(st.clause("Do")[0].value, handle, line)
            return builder.do(action)

        if not isinstance(handle, ServerHandle):
            raise ImsError(f"{st.subject} is not a conference server")
        if verb == "supportingConference":
            return handle.supporting_conference()
        if verb == "createConf":
            parts = st.clause("withInitialParticipants") or st.clause("withInitialParticipant")
            a, a_id, b, b_id = parts
            return handle.create_conf(self._uri(args[0], line)).with_initial_participants(
                self._participant(a, line), self._text(a_id, line),
                self._participant(b, line), self._text(b_id, line))
        if verb == "updateConf":
            number = st.clause("withNewParticipant")[0]
            return handle.update_conf(self._uri(args[0], line)).with_new_participant(
                self._participant(number, line))
        if verb == "retrieveConf":
            uri = st.clause("addNewParticipant")[0]
            return handle.retrieve_conf(self._uri(args[0], line)).add_new_participant(
                self._participant(uri, line))
        if verb == "removeParticipant":
            return handle.remove_participant(self._uri(args[0], line))
        raise ImsError(f"unsupported verb {verb}")


def _message_type(name: str) -> RequestType | StatusCode:
    try:
        return RequestType.from_name(name)
    except ValueError:
        return StatusCode.from_name(name)


def _server_subjects(script: Script) -> set[str]:
    subjects = set()
    for item in script:
        statements = item.body if isinstance(item, ActionDef) else [item]
        for st in statements:
            if st.verb in SERVER_VERBS or any(
                    st.clause("Do") and st.clause("Do")[0].value == name
                    for name in ("bridge", "hangUp", "dtmfConference")):
                subjects.add(st.subject)
    return subjects


def execute(statements: Script, env: Environment) -> Environment:
    """Run parsed statements against ``env`` and return it."""
    return Interpreter(env).run(statements)


def run_script(text: str, env: Environment) -> Environment:
    return execute(parse_script(text), env)
