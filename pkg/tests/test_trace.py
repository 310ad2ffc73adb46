from __future__ import annotations

import itertools
import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DOMAIN
from ims_dsl import RequestType, SipMessage, StatusCode, make_response, serialize_message
from ims_dsl.errors import HandshakeMissing
from ims_dsl.trace import (
    CollectorServer,
    RECEIVED,
    SENT,
    TIMEOUT,
    TraceEvent,
    Tracer,
    call_site,
    collect,
    dump_group,
    emit_diagram,
    group,
    load_session,
)

HEADERS = [("Via", "SIP/2.0/UDP a:1"), ("From", "<sip:alice@ims.test>"), ("To", "<sip:bob@ims.test>"),
           ("Call-ID", "c1"), ("CSeq", "1 MESSAGE")]
REQ = SipMessage.request(RequestType.MESSAGE, "sip:bob@ims.test", HEADERS, body="hi")


def _ev(app, seq, t, direction, msg, site="s"):
    raw = msg if isinstance(msg, bytes) else serialize_message(msg)
    return TraceEvent(app, seq, t, direction, raw, site)


def test_capture_sent_and_received(ims, users):
    alice, bob = users("alice", "bob")
    ims.tracer.clear()
    alice.send("hi").to(bob).wait()
    events = ims.tracer.events
    sent = [e for e in events if e.app_id == "alice" and e.direction == SENT]
    got = [e for e in events if e.app_id == "bob" and e.direction == RECEIVED]
    assert sent[0].raw == got[0].raw
    assert sent[0].call_site == "send"
    for app, stream in ims.tracer.streams().items():
        assert [e.seq_in_app for e in stream] == list(range(1, len(stream) + 1))


def test_disabled_tracer_records_nothing():
    tracer = Tracer(enabled=False)
    tracer.record("a", SENT, b"x")
    assert tracer.events == []


def test_buffer_is_bounded_oldest_dropped():
    tracer = Tracer(clock=itertools.count().__next__)
    for _ in range(10_005):
        tracer.record("a", SENT, b"x")
    events = tracer.events
    assert len(events) == 10_000
    assert events[0].seq_in_app == 6


def test_collector_down_keeps_local_buffer():
    tracer = Tracer()
    tracer.connect("127.0.0.1", 9)  # discard port, nothing listening
    tracer.record("a", SENT, b"x")
    tracer.flush(2.0)
    assert len(tracer.events) == 1
    tracer.close()


def test_call_site_nests():
    tracer = Tracer()
    with call_site("outer"):
        with call_site("inner"):
            tracer.record("a", SENT, b"1")
        tracer.record("a", SENT, b"2")
    assert [e.call_site for e in tracer.events] == ["inner", "outer"]


def _oracle_merge(streams, offsets):
    """Selection sort over the flattened events: repeatedly take the minimum.
    Times compare at microsecond resolution."""
    pool = [e for events in streams.values() for e in events]
    out = []
    while pool:
        best = pool[0]
        for e in pool[1:]:
            a = (round(e.wall_time * 1e6) + 1000 * offsets[e.app_id], e.app_id, e.seq_in_app)
            b = (round(best.wall_time * 1e6) + 1000 * offsets[best.app_id], best.app_id, best.seq_in_app)
            if a < b:
                best = e
        pool.remove(best)
        out.append(best)
    return out


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["alice", "bob", "carol"]),
                       st.lists(st.integers(0, 50), max_size=12), min_size=1),
       st.lists(st.integers(-60, 60), min_size=3, max_size=3))
def test_collect_matches_sort_oracle(times, offs):
    streams = {}
    for app, ts in times.items():
        streams[app] = [_ev(app, i + 1, t / 1000.0, SENT, b"x") for i, t in enumerate(sorted(ts))]
    offsets = dict(zip(["alice", "bob", "carol"], offs))
    assert collect(streams, offsets) == _oracle_merge(streams, offsets)


def test_collect_offset_and_tiebreak():
    a = [_ev("alice", 1, 0.100, SENT, b"x")]
    b = [_ev("bob", 1, 0.060, SENT, b"x")]
    assert [e.app_id for e in collect({"alice": a, "bob": b}, {"alice": 0, "bob": 50})] == ["alice", "bob"]
    assert [e.app_id for e in collect({"bob": b, "alice": a}, {"alice": 0, "bob": 40})] == ["alice", "bob"]
    with pytest.raises(HandshakeMissing):
        collect({"alice": a}, {})


def test_group_statuses():
    ok = make_response(REQ, StatusCode.OK)
    nf = make_response(REQ.with_header("Call-ID", "c2"), StatusCode.NOT_FOUND)
    lone = REQ.with_header("Call-ID", "c3")
    timed = REQ.with_header("Call-ID", "c4")
    events = [
        _ev("alice", 1, 0.0, SENT, REQ), _ev("alice", 2, 0.1, RECEIVED, ok),
        _ev("alice", 3, 0.2, SENT, REQ.with_header("Call-ID", "c2")), _ev("alice", 4, 0.3, RECEIVED, nf),
        _ev("alice", 5, 1.0, SENT, lone),
        _ev("alice", 6, 1.0, SENT, timed),
        _ev("alice", 7, 6.0, TIMEOUT, make_response(timed, StatusCode.REQUEST_TIMEOUT)),
        _ev("alice", 8, 7.0, RECEIVED, b"garbage\r\n\r\n"),
    ]
    groups = {g.key: g.status for g in group(events)}
    assert groups == {"c1|1 MESSAGE": "success", "c2|1 MESSAGE": "failure",
                      "c3|1 MESSAGE": "pending", "c4|1 MESSAGE": "failure", "malformed": "failure"}
    assert {g.key: g.status for g in group(events[:5] + [events[4]], now=3.0)}["c3|1 MESSAGE"] == "pending"
    assert {g.key: g.status for g in group(events, now=6.5)}["c3|1 MESSAGE"] == "failure"
    again = {g.key: g.status for g in group(list(events))}
    assert again == groups


def test_partition_every_event_once(ims, users):
    alice, bob = users("alice", "bob")
    alice.send("a").to(bob).wait()
    alice.send("b").to("sip:carol@ims.test").wait()
    events = ims.tracer.events
    groups = group(events)
    assert sorted(id(e) for g in groups for e in g.events) == sorted(id(e) for e in events)


def test_emit_empty_and_malformed():
    assert emit_diagram([]) == "sequenceDiagram\n"
    text = emit_diagram(group([_ev("alice", 1, 0.0, RECEIVED, b"junk\r\n\r\n", "")]))
    assert "core->>alice: MALFORMED" in text
    assert "Note over core,alice: FAILURE malformed" in text


def test_emit_deterministic_with_participant_order():
    events = [_ev("alice", 1, 0.0, SENT, REQ), _ev("bob", 1, 0.1, RECEIVED, REQ, "incoming")]
    groups = group(events)
    text = emit_diagram(groups, ["bob", "core", "alice"])
    assert text.splitlines()[1:4] == ["    participant bob", "    participant core", "    participant alice"]
    assert emit_diagram(group(list(events)), ["bob", "core", "alice"]) == text
    assert "    core->>bob: MESSAGE [incoming]" in text


def test_dump_group():
    groups = group([_ev("alice", 1, 0.0, SENT, REQ)])
    text = dump_group(groups, "c1|1 MESSAGE")
    assert "MESSAGE sip:bob@ims.test SIP/2.0" in text and text.rstrip().endswith("hi")
    with pytest.raises(KeyError):
        dump_group(groups, "nope")


def test_collector_round_trip(tmp_path):
    path = tmp_path / "s.trace.jsonl"
    server = CollectorServer(("127.0.0.1", 0), path)
    import threading
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        tracer = Tracer()
        tracer.connect(*server.server_address[:2])
        tracer.record("alice", SENT, serialize_message(REQ), "send")
        tracer.record("bob", RECEIVED, serialize_message(REQ), "incoming")
        tracer.close()
        deadline = time.time() + 3
        while time.time() < deadline and path.read_text().count("raw_b64") < 2:
            time.sleep(0.02)
    finally:
        server.shutdown()
        server.server_close()
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert {"app", "t0"} <= set(lines[0])
    records = [r for r in lines if "raw_b64" in r]
    assert set(records[0]) == {"app", "seq", "t", "dir", "site", "raw_b64"}
    streams, offsets = load_session(path)
    assert set(streams) == set(offsets) == {"alice", "bob"}
    assert all(abs(o) < 1000 for o in offsets.values())
    merged = collect(streams, offsets)
    assert [e.raw for e in merged] == [serialize_message(REQ)] * 2
