from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SCENARIOS, make_config
from ims_dsl import Ims, ProvisioningConfig, RequestType, StatusCode
from ims_dsl.errors import ScriptRuntimeError, ScriptSyntaxError, UnknownBinding
from ims_dsl.interpreter import (
    KEYWORDS,
    ActionDef,
    Arg,
    Environment,
    Statement,
    execute,
    parse_script,
    run_script,
    tokenize_line,
    unparse,
)

# One concrete instance of every statement form the grammar accepts.
SYNTAX_BLOCKS = [
    'alice hasCredentials("alice", "ims.test", "pw1")',
    'alice sendRequest Info to "sip:bob@ims.test"',
    'alice sendRequest Info withHeader("X-K", "v") to bob',
    'alice sendRequest Info withContentType "application/dtmf-relay" withBody "Signal=5" '
    'withHeader("A", "1") withHeader("B", "2") to bob',
    'server sendStatus Ok inResponseTo incoming',
    'alice send "Hello World" to "sip:bob@ims.test"',
    'alice send "{}" withContentType "application/json" withHeader("X-K", "v") to bob',
    'alice publish "<hr>72</hr>" as "vitals"',
    'alice addContact "sip:bob@ims.test"',
    'alice removeContact bob',
    'alice newContactList "family"',
    'alice removeContactList "family"',
    'alice add "sip:bob@ims.test" to "family"',
    'alice remove bob from "family"',
    'bob onReceive Message Do ack',
    'bob onReceive Any withContentType "text/plain" withBody "hi" withHeader("X-K", "v") '
    'from "sip:alice@ims.test" Do log',
    'server onDtmf Do dtmfConference',
    'server supportingConference',
    'server createConf "15141234000@ims.server.ericsson.com" withInitialParticipants '
    '"15141234567@ims.server.ericsson.com" "12345634567" "15141234568@ims.server.ericsson.com" "12345634568"',
    'server createConf conf withInitialParticipant a "1" b "2"',
    'server updateConf "15141234000@ims.server.ericsson.com" withNewParticipant "15141234568"',
    'server updateConf conf withNewParticipant 5145551234',
    'server retrieveConf conf addNewParticipant "sip:carol@ims.server.ericsson.com"',
    'server removeParticipant "sip:carol@ims.server.ericsson.com"',
]
ACTION_BLOCK = 'action greet\n    bob sendStatus Ok inResponseTo incoming\nend'


def _tokens(text: str) -> list[tuple[str, str]]:
    return [(t.kind, t.value) for line in text.splitlines() for t in tokenize_line(line, 1)]


def test_chained_send_example():
    (st_,) = parse_script('alice send "Hello World" to "sip:bob@ims.test"')
    assert st_ == Statement("alice", [("send", [Arg("string", "Hello World")]),
                                      ("to", [Arg("string", "sip:bob@ims.test")])], 1)


def test_create_conf_statement():
    (st_,) = parse_script(SYNTAX_BLOCKS[18])
    assert st_.verb == "createConf"
    assert len(st_.clause("withInitialParticipants")) == 4


@pytest.mark.parametrize("text, line, expected", [
    ("alice sendRequest", 1, "request type"),
    ("\n\nalice sendRequest Info", 3, "'to'"),
    ("alice sendd \"x\" to bob", 1, "verb"),
    ("alice send \"x\" to", 1, "SIP URI"),
    ("alice send \"unterminated", 1, "closing quote"),
    ("alice send \"bad \\n escape\" to bob", 1, "escape"),
    ("alice hasCredentials(\"a\", \"b\")", 1, "','"),
    ("bob onReceive Message Do", 1, "action name"),
    ("send \"x\" to bob", 1, "subject"),
    ("alice supportingConference extra", 1, "end of statement"),
    ("action a\nalice supportingConference", 1, "'end'"),
    ("end", 1, "statement"),
])
def test_syntax_errors(text, line, expected):
    with pytest.raises(ScriptSyntaxError) as info:
        parse_script(text)
    assert info.value.line == line
    assert expected in info.value.expected


def test_comments_continuation_and_escapes():
    script = parse_script('// greeting\nalice send "say \\"hi\\" \\\\ bye" \\\n    to bob  // trailing\n\nbob supportingConference')
    first, second = script
    assert first.chain[0][1][0].value == 'say "hi" \\ bye'
    assert first.line == 2 and second.line == 5


def test_action_definitions():
    (definition,) = parse_script(ACTION_BLOCK)
    assert isinstance(definition, ActionDef)
    assert definition.name == "greet" and definition.body[0].verb == "sendStatus"


@pytest.mark.parametrize("text", SYNTAX_BLOCKS + [ACTION_BLOCK])
def test_parse_unparse_round_trip(text):
    (item,) = parse_script(text)
    assert _tokens(unparse(item)) == _tokens(text)


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r"), max_size=20)


@settings(max_examples=200, deadline=None)
@given(_text, _text, st.sampled_from(["alice", "bob_2", "Srv"]))
def test_round_trip_with_arbitrary_strings(body, header, subject):
    item = Statement(subject, [("sendRequest", [Arg("name", "Info")]), ("withBody", [Arg("string", body)]),
                               ("withHeader", [Arg("string", "X"), Arg("string", header)]),
                               ("to", [Arg("name", "bob")])], 1)
    (parsed,) = parse_script(unparse(item))
    assert parsed == item


def test_every_keyword_is_reachable():
    used = set()
    for text in SYNTAX_BLOCKS + [ACTION_BLOCK]:
        for item in parse_script(text):
            if isinstance(item, ActionDef):
                used |= {"action", "end"}
                statements = item.body
            else:
                statements = [item]
            for st_ in statements:
                used |= {kw for kw, _ in st_.chain}
    assert used == KEYWORDS


def _env(*names):
    return Environment(Ims.simulated(make_config(*names)))


def test_two_line_register_then_send():
    env = run_script(
        'alice hasCredentials("alice", "ims.test", "alice-pw")\n'
        'bob hasCredentials("bob", "ims.test", "bob-pw")\n'
        'alice send "hi" to bob\n', _env("alice", "bob"))
    sent = env.results[-1]
    assert sent.final.status is StatusCode.OK
    assert env.bindings["bob"].requests_received(RequestType.MESSAGE)[0].body_text == "hi"


def test_explicit_ack_action_no_duplicate():
    env = run_script(
        'alice hasCredentials("alice", "ims.test", "alice-pw")\n'
        'bob hasCredentials("bob", "ims.test", "bob-pw")\n'
        'bob onReceive Message Do ack\n'
        'alice send "hi" to bob\n', _env("alice", "bob"))
    env.ims.settle()
    sent = env.results[-1]
    assert [r.status for r in sent.responses] == [StatusCode.OK]
    sites = [e.call_site for e in env.ims.tracer.events if e.app_id == "bob" and e.direction == "sent"
             and b"MESSAGE" in e.raw]
    assert sites == ["send_status"]


def test_user_defined_action_uses_incoming():
    env = run_script(
        'alice hasCredentials("alice", "ims.test", "alice-pw")\n'
        'bob hasCredentials("bob", "ims.test", "bob-pw")\n'
        'action refuse\n'
        '    bob sendStatus Forbidden inResponseTo incoming\n'
        'end\n'
        'bob onReceive Info Do refuse\n'
        'alice sendRequest Info to bob\n', _env("alice", "bob"))
    assert env.results[-1].final.status is StatusCode.FORBIDDEN


def test_log_action_records():
    env = run_script(
        'alice hasCredentials("alice", "ims.test", "alice-pw")\n'
        'bob hasCredentials("bob", "ims.test", "bob-pw")\n'
        'bob onReceive Message Do log\n'
        'alice send "hi" to bob\n', _env("alice", "bob"))
    assert env.log == ["sip:bob@ims.test received MESSAGE from sip:alice@ims.test"]


def test_unknown_bindings():
    env = _env("alice", "bob")
    with pytest.raises(UnknownBinding) as info:
        run_script('carol send "hi" to "sip:bob@ims.test"', env)
    assert info.value.line == 1
    with pytest.raises(UnknownBinding):
        run_script('alice hasCredentials("alice", "ims.test", "alice-pw")\nalice send "x" to bob', env)
    with pytest.raises(UnknownBinding):
        run_script('alice onReceive Message Do nosuchaction', env)
    with pytest.raises(UnknownBinding):
        run_script('alice sendStatus Ok inResponseTo incoming', env)


def test_runtime_error_wraps_dsl_failure():
    with pytest.raises(ScriptRuntimeError) as info:
        run_script('\nalice hasCredentials("alice", "ims.test", "wrong")', _env("alice"))
    assert info.value.line == 2
    assert "403" in str(info.value.cause)


def test_host_registered_action():
    env = _env("alice", "bob")
    seen = []
    env.register_action("remember", lambda handle, env: seen.append)
    execute(parse_script('alice hasCredentials("alice", "ims.test", "alice-pw")\n'
                         'bob hasCredentials("bob", "ims.test", "bob-pw")\n'
                         'bob onReceive Message Do remember\n'
                         'alice send "x" to bob'), env)
    assert [m.body_text for m in seen] == ["x"]


def test_shipped_scenarios_parse():
    for path in SCENARIOS.glob("*.ims"):
        assert parse_script(path.read_text()), path


def test_conference_script_runs():
    config = ProvisioningConfig.load(SCENARIOS / "conference.json")
    env = run_script((SCENARIOS / "conference.ims").read_text(), Environment(Ims.simulated(config)))
    env.ims.settle()
    ops = [c.op for c in env.ims.core.journal]
    assert ops == ["ADD"] * 3 + ["SUBTRACT"] * 3
    assert env.bindings["server"].conferences == {}
