"""Packet capture, multi-application collection, grouping and sequence diagrams.

Capture happens inside the user agents: every datagram an agent sends or
receives becomes a :class:`TraceEvent` tagged with the DSL operation that
caused it. Applications stream events to a :class:`CollectorServer` as
newline-delimited JSON; the collector writes a ``.trace.jsonl`` session
file which :func:`load_session`, :func:`collect`, :func:`group` and
:func:`emit_diagram` turn into a Mermaid ``sequenceDiagram``.
"""

from __future__ import annotations

import base64
import contextlib
import contextvars
import json
import logging
import queue
import re
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import HandshakeMissing, MalformedMessage
from .sip import parse_message, transaction_key

log = logging.getLogger(__name__)

SENT = "sent"
RECEIVED = "received"
TIMEOUT = "timeout"
MALFORMED_KEY = "malformed"
CORE = "core"
BUFFER_LIMIT = 10_000
SYNC_SAMPLES = 5
TRANSACTION_TIMEOUT = 5.0

_site: contextvars.ContextVar[str] = contextvars.ContextVar("call_site", default="")


def current_site() -> str:
    return _site.get()


@contextlib.contextmanager
def call_site(label: str):
    """Label every packet produced inside the block with ``label``."""
    token = _site.set(label)
    try:
        yield
    finally:
        _site.reset(token)


@dataclass(frozen=True)
class TraceEvent:
    app_id: str
    seq_in_app: int
    wall_time: float
    direction: str
    raw: bytes
    call_site: str = ""

    def to_record(self) -> dict:
        return {
            "app": self.app_id,
            "seq": self.seq_in_app,
            "t": self.wall_time,
            "dir": self.direction,
            "site": self.call_site,
            "raw_b64": base64.b64encode(self.raw).decode("ascii"),
        }

    @classmethod
    def from_record(cls, record: Mapping) -> TraceEvent:
        return cls(record["app"], int(record["seq"]), float(record["t"]), record["dir"],
                   base64.b64decode(record["raw_b64"]), record.get("site", ""))


@dataclass
class PacketGroup:
    key: str
    events: list[TraceEvent] = field(default_factory=list)
    status: str = "pending"


class Tracer:
    """Per-process capture hook shared by every agent in the process.

    Events are kept in a bounded local buffer (oldest dropped first) and,
    when a collector address is set, streamed to it from a background
    thread so the traffic path never blocks on the collector.
    """

    def __init__(self, enabled: bool = True, clock: Callable[[], float] = time.time,
                 capacity: int = BUFFER_LIMIT):
        self.enabled = enabled
        self.clock = clock
        self._buffer: deque[TraceEvent] = deque(maxlen=capacity)
        self._seq: dict[str, int] = {}
        self._lock = threading.Lock()
        self._client: CollectorClient | None = None

    def connect(self, host: str, port: int) -> None:
        self._client = CollectorClient(host, port)

    def record(self, app_id: str, direction: str, raw: bytes, site: str | None = None) -> None:
        if not self.enabled:
            return
        with self._lock:
            seq = self._seq.get(app_id, 0) + 1
            self._seq[app_id] = seq
            event = TraceEvent(app_id, seq, self.clock(), direction, bytes(raw),
                               current_site() if site is None else site)
        self.capture(event)

    def capture(self, event: TraceEvent) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._buffer.append(event)
        if self._client is not None:
            self._client.submit(event)

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._buffer)

    def streams(self) -> dict[str, list[TraceEvent]]:
        out: dict[str, list[TraceEvent]] = {}
        for event in self.events:
            out.setdefault(event.app_id, []).append(event)
        return out

    def clear(self) -> None:
        with self._lock:
            self._buffer.clear()
            self._seq.clear()

    def flush(self, timeout: float = 5.0) -> None:
        if self._client is not None:
            self._client.flush(timeout)

    def close(self) -> None:
        if self._client is not None:
            self._client.close()


class CollectorClient:
    """Streams events to a collector, one TCP connection per application."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self._queue: queue.Queue = queue.Queue()
        self._conns: dict[str, tuple[socket.socket, object]] = {}
        self._thread = threading.Thread(target=self._run, daemon=True, name="trace-client")
        self._thread.start()

    def submit(self, event: TraceEvent) -> None:
        self._queue.put(event)

    def _connection(self, app_id: str):
        conn = self._conns.get(app_id)
        if conn is None:
            sock = socket.create_connection((self.host, self.port), timeout=5)
            reader = sock.makefile("r", encoding="utf-8")
            # Several handshakes; the collector keeps the one with the least delay.
            for _ in range(SYNC_SAMPLES):
                sock.sendall((json.dumps({"app": app_id, "t0": time.time()}) + "\n").encode())
                reader.readline()
            conn = self._conns[app_id] = (sock, reader)
        return conn

    def _run(self) -> None:
        while True:
            event = self._queue.get()
            try:
                if event is None:
                    return
                try:
                    sock, _ = self._connection(event.app_id)
                    sock.sendall((json.dumps(event.to_record()) + "\n").encode())
                except OSError as exc:
                    log.debug("collector unavailable: %s", exc)
                    self._conns.pop(event.app_id, None)
            finally:
                self._queue.task_done()

    def flush(self, timeout: float = 5.0) -> None:
        deadline = time.monotonic() + timeout
        while self._queue.unfinished_tasks and time.monotonic() < deadline:
            time.sleep(0.01)

    def close(self) -> None:
        self.flush()
        self._queue.put(None)
        self._thread.join(timeout=2)
        for sock, reader in self._conns.values():
            with contextlib.suppress(OSError):
                reader.close()
                sock.close()
        self._conns.clear()


class _CollectorHandler(socketserver.StreamRequestHandler):
    """One application stream: handshake records ``{app, t0}`` then event records.

    Every handshake gets a ``{t}`` reply. The offset kept for the stream is
    the smallest ``collector_time - t0`` seen, i.e. the sample least inflated
    by transit delay. It is written to the session right after the first
    handshake line, once the first event (or the end of the stream) shows
    that sampling is over.
    """

    def handle(self):
        server: CollectorServer = self.server  # type: ignore[assignment]
        app = None
        best: int | None = None
        offset_written = False
        for line in self.rfile:
            text = line.decode("utf-8").strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError:
                log.warning("collector: dropping non-JSON line")
                continue
            if "t0" in record and "raw_b64" not in record:
                now = time.time()
                self.wfile.write((json.dumps({"t": now}) + "\n").encode())
                self.wfile.flush()
                sample = round((now - float(record["t0"])) * 1000)
                best = sample if best is None else min(best, sample)
                if app is None:
                    app = record.get("app")
                    server.write(text)
                continue
            if app is not None and not offset_written:
                server.write(json.dumps({"app": app, "offset_ms": best}))
                offset_written = True
            server.write(text)
        if app is not None and not offset_written:
            server.write(json.dumps({"app": app, "offset_ms": best}))


class CollectorServer(socketserver.ThreadingTCPServer):
    """Accepts application streams and appends every record to a session file."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], session_path: str | Path):
        super().__init__(address, _CollectorHandler)
        self.session_path = Path(session_path)
        self._file = self.session_path.open("a", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, line: str) -> None:
        with self._lock:
            self._file.write(line + "\n")
            self._file.flush()

    def server_close(self) -> None:
        super().server_close()
        with self._lock:
            self._file.close()


def load_session(path: str | Path) -> tuple[dict[str, list[TraceEvent]], dict[str, int]]:
    """Read a session file into per-application streams and clock offsets."""
    streams: dict[str, list[TraceEvent]] = {}
    offsets: dict[str, int] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "offset_ms" in record:
                offsets[record["app"]] = int(record["offset_ms"])
            elif "raw_b64" in record:
                event = TraceEvent.from_record(record)
                streams.setdefault(event.app_id, []).append(event)
    return streams, offsets


def _corrected_us(event: TraceEvent, offsets: Mapping[str, int]) -> int:
    # Integer microseconds, so equal corrected times compare equal and the
    # app_id tiebreak applies instead of float rounding noise.
    return round(event.wall_time * 1_000_000) + offsets[event.app_id] * 1000


def collect(streams: Mapping[str, Sequence[TraceEvent]],
            offsets: Mapping[str, int]) -> list[TraceEvent]:
    """Merge per-application streams onto the collector's reference clock."""
    for app in streams:
        if app not in offsets:
            raise HandshakeMissing(f"no clock offset for application {app!r}")
    merged = [event for events in streams.values() for event in events]
    merged.sort(key=lambda e: (_corrected_us(e, offsets), e.app_id, e.seq_in_app))
    return merged


def _status(events: Iterable[TraceEvent], now: float | None) -> str:
    first = None
    failed = False
    for event in events:
        if first is None:
            first = event.wall_time
        if event.direction == TIMEOUT:
            failed = True
            continue
        msg = parse_message(event.raw)
        if msg.is_response and msg.status.is_final:
            if 200 <= msg.status.code < 300:
                return "success"
            failed = True
    if failed:
        return "failure"
    if now is not None and first is not None and now - first >= TRANSACTION_TIMEOUT:
        return "failure"
    return "pending"


def group(events: Sequence[TraceEvent], now: float | None = None) -> list[PacketGroup]:
    """Partition events by transaction and classify each group.

    ``now`` is the replay time; a group with no final response becomes a
    failure once ``now`` is past the transaction timeout.
    """
    groups: dict[str, PacketGroup] = {}
    for event in events:
        try:
            key = transaction_key(parse_message(event.raw))
        except MalformedMessage:
            key = MALFORMED_KEY
        groups.setdefault(key, PacketGroup(key)).events.append(event)
    for g in groups.values():
        g.status = "failure" if g.key == MALFORMED_KEY else _status(g.events, now)
    return list(groups.values())


def _ident(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", name)


def _label(event: TraceEvent) -> str:
    try:
        msg = parse_message(event.raw)
    except MalformedMessage:
        text = "MALFORMED"
    else:
        text = msg.method.value if msg.is_request else str(msg.status)
    if event.call_site:
        text += f" [{event.call_site}]"
    return text


def _ends(event: TraceEvent) -> tuple[str, str]:
    if event.direction == SENT:
        return event.app_id, CORE
    return CORE, event.app_id


def diagram_participants(groups: Sequence[PacketGroup]) -> list[str]:
    order: list[str] = []
    for g in groups:
        for event in g.events:
            for name in _ends(event):
                if name not in order:
                    order.append(name)
    return order


def emit_diagram(groups: Sequence[PacketGroup], participants: Sequence[str] | None = None) -> str:
    """Render groups as Mermaid ``sequenceDiagram`` text; output is deterministic."""
    order = list(participants) if participants else diagram_participants(groups)
    for name in diagram_participants(groups):
        if name not in order:
            order.append(name)
    lines = ["sequenceDiagram"]
    lines.extend(f"    participant {_ident(p)}" for p in order)
    rank = {p: i for i, p in enumerate(order)}
    for g in groups:
        touched: set[str] = set()
        for event in g.events:
            src, dst = _ends(event)
            if event.direction == TIMEOUT:
                lines.append(f"    Note over {_ident(event.app_id)}: TIMEOUT")
                touched.add(event.app_id)
                continue
            lines.append(f"    {_ident(src)}->>{_ident(dst)}: {_label(event)}")
            touched.update((src, dst))
        span = sorted(touched, key=rank.__getitem__)
        where = _ident(span[0]) if len(span) == 1 else f"{_ident(span[0])},{_ident(span[-1])}"
        lines.append(f"    Note over {where}: {g.status.upper()} {g.key}")
    return "\n".join(lines) + "\n"


def dump_group(groups: Sequence[PacketGroup], key: str) -> str:
    """Full raw contents of every packet in the group ``key``."""
    for g in groups:
        if g.key == key:
            parts = []
            for event in g.events:
                header = f"--- {event.app_id} #{event.seq_in_app} {event.direction} [{event.call_site}]"
                parts.append(header + "\n" + event.raw.decode("utf-8", errors="replace"))
            return "\n".join(parts) + "\n"
    raise KeyError(key)
