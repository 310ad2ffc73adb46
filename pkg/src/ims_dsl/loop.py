"""A small callback scheduler shared by the agents and the core of one process.

Two clocks are supported. ``virtual`` time only advances when nothing is
runnable, jumping straight to the next timer; this makes in-memory
scenarios deterministic and instantaneous. ``real`` time follows
``time.monotonic`` and lets other threads (socket readers, HTTP handlers)
post work with :meth:`EventLoop.call_soon`.

Blocking DSL operations pump the loop with :meth:`run_until`; the call is
re-entrant so a handler may itself wait for a response.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from collections import deque
from typing import Callable

log = logging.getLogger(__name__)


class TimerHandle:
    __slots__ = ("when", "callback", "args", "cancelled")

    def __init__(self, when: float, callback: Callable, args: tuple):
        self.when = when
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    def __init__(self, clock: str = "virtual", start: float = 0.0):
        if clock not in ("virtual", "real"):
            raise ValueError(f"unknown clock {clock!r}")
        self.clock = clock
        self._virtual_now = start
        self._ready: deque[tuple[Callable, tuple]] = deque()
        self._timers: list[tuple[float, int, TimerHandle]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False

    def time(self) -> float:
        if self.clock == "virtual":
            return self._virtual_now
        return time.monotonic()

    def call_soon(self, callback: Callable, *args) -> None:
        """Queue ``callback``; safe to call from any thread."""
        with self._cond:
            self._ready.append((callback, args))
            self._cond.notify_all()

    def call_later(self, delay: float, callback: Callable, *args) -> TimerHandle:
        handle = TimerHandle(self.time() + max(0.0, delay), callback, args)
        with self._cond:
            heapq.heappush(self._timers, (handle.when, next(self._seq), handle))
            self._cond.notify_all()
        return handle

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()

    def _pop_due(self, now: float) -> None:
        while self._timers and self._timers[0][0] <= now:
            _, _, handle = heapq.heappop(self._timers)
            if not handle.cancelled:
                self._ready.append((handle.callback, handle.args))

    def _next_timer(self) -> float | None:
        while self._timers and self._timers[0][2].cancelled:
            heapq.heappop(self._timers)
        return self._timers[0][0] if self._timers else None

    def _run_one(self) -> bool:
        with self._cond:
            self._pop_due(self.time())
            if not self._ready:
                return False
            callback, args = self._ready.popleft()
        try:
            callback(*args)
        except Exception:
            log.exception("callback %r raised", callback)
        return True

    def run_until(self, predicate: Callable[[], bool], timeout: float) -> bool:
        """Process callbacks until ``predicate()`` holds or ``timeout`` seconds pass."""
        deadline = self.time() + timeout
        while True:
            if predicate():
                return True
            if self._run_one():
                continue
            with self._cond:
                if self._ready:
                    continue
                nxt = self._next_timer()
                if self.clock == "virtual":
                    if nxt is not None and nxt <= deadline:
                        self._virtual_now = max(self._virtual_now, nxt)
                        continue
                    self._virtual_now = max(self._virtual_now, deadline)
                    return predicate()
                now = time.monotonic()
                if now >= deadline:
                    return predicate()
                wake = deadline if nxt is None else min(nxt, deadline)
                self._cond.wait(max(0.0, wake - now))

    def run_for(self, seconds: float) -> None:
        self.run_until(lambda: False, seconds)

    def run_idle(self) -> None:
        """Drain everything runnable now without advancing virtual time."""
        while self._run_one():
            pass

    def run_forever(self) -> None:
        """Serve until :meth:`stop` is called (real clock only)."""
        self._stopped = False
        while not self._stopped:
            self.run_until(lambda: self._stopped, 3600.0)
