"""Datagram delivery between user agents and the core.

``InMemoryNetwork`` is a loopback fabric driven by an :class:`EventLoop`;
``UdpNetwork`` binds one UDP socket per endpoint and posts received
datagrams onto the same kind of loop.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass
from typing import Callable

from .errors import AddressInUse, SendFailed
from .loop import EventLoop

log = logging.getLogger(__name__)

MAX_DATAGRAM = 64 * 1024

ReceiveCallback = Callable[[bytes, str], None]


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = "in_memory"
    latency_ms: int = 0
    drop: bool = False

    def __post_init__(self):
        if self.mode not in ("in_memory", "udp"):
            raise ValueError(f"unknown transport mode {self.mode!r}")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


class Attachment:
    """A party's presence on a network; ``send`` originates from ``address``."""

    def __init__(self, network, address: str):
        self.network = network
        self.address = address
        self.attached = True

    def send(self, to: str, datagram: bytes) -> None:
        self.network.send(self.address, to, datagram)

    def detach(self) -> None:
        if self.attached:
            self.network.detach(self.address)
            self.attached = False


class InMemoryNetwork:
    def __init__(self, loop: EventLoop, config: NetworkConfig | None = None):
        self.loop = loop
        self.config = config or NetworkConfig()
        self._parties: dict[str, ReceiveCallback] = {}
        self._lock = threading.Lock()
        self.delivered = 0

    def attach(self, address: str, receive: ReceiveCallback) -> Attachment:
        if not address:
            raise ValueError("endpoint address must be non-empty")
        with self._lock:
            if address in self._parties:
                raise AddressInUse(address)
            self._parties[address] = receive
        return Attachment(self, address)

    def detach(self, address: str) -> None:
        with self._lock:
            self._parties.pop(address, None)

    def is_attached(self, address: str) -> bool:
        with self._lock:
            return address in self._parties

    def send(self, sender: str, to: str, datagram: bytes) -> None:
        with self._lock:
            if sender not in self._parties:
                raise SendFailed(f"sender {sender!r} is not attached")
            if to not in self._parties:
                raise SendFailed(f"unknown destination {to!r}")
        if len(datagram) > MAX_DATAGRAM:
            raise SendFailed(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM}")
        if self.config.drop:
            return
        data = bytes(datagram)
        if self.config.latency_ms:
            self.loop.call_later(self.config.latency_ms / 1000.0, self._deliver, sender, to, data)
        else:
            self.loop.call_soon(self._deliver, sender, to, data)

    def _deliver(self, sender: str, to: str, data: bytes) -> None:
        with self._lock:
            receive = self._parties.get(to)
        if receive is None:
            log.debug("dropping datagram for detached %s", to)
            return
        self.delivered += 1
        receive(data, sender)


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class UdpNetwork:
    """Best-effort UDP; ``attach("127.0.0.1:0", ...)`` picks a free port."""

    def __init__(self, loop: EventLoop, config: NetworkConfig | None = None):
        self.loop = loop
        self.config = config or NetworkConfig(mode="udp")
        self._sockets: dict[str, socket.socket] = {}
        self._lock = threading.Lock()

    def attach(self, address: str, receive: ReceiveCallback) -> Attachment:
        host, port = split_address(address)
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise AddressInUse(f"{address}: {exc}") from exc
        bound = f"{host}:{sock.getsockname()[1]}"
        with self._lock:
            self._sockets[bound] = sock
        thread = threading.Thread(target=self._reader, args=(sock, receive), daemon=True,
                                  name=f"udp-{bound}")
        thread.start()
        return Attachment(self, bound)

    def _reader(self, sock: socket.socket, receive: ReceiveCallback) -> None:
        while True:
            try:
                data, (host, port) = sock.recvfrom(MAX_DATAGRAM)
            except (ConnectionResetError, ConnectionRefusedError):
                continue
            except OSError:
                return
            self.loop.call_soon(receive, data, f"{host}:{port}")

    def detach(self, address: str) -> None:
        with self._lock:
            sock = self._sockets.pop(address, None)
        if sock is not None:
            sock.close()

    def is_attached(self, address: str) -> bool:
        with self._lock:
            return address in self._sockets

    def send(self, sender: str, to: str, datagram: bytes) -> None:
        with self._lock:
            sock = self._sockets.get(sender)
        if sock is None:
            raise SendFailed(f"sender {sender!r} is not attached")
        if len(datagram) > MAX_DATAGRAM:
            raise SendFailed(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM}")
        if self.config.drop:
            return
        try:
            sock.sendto(datagram, split_address(to))
        except OSError as exc:
            log.warning("udp send to %s failed: %s", to, exc)
