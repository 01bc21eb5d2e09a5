"""Broadcast discovery: agents answer Probe datagrams with Announce.

The manager side also supports a unicast scan over known ``host:port`` pairs,
sending a framed Probe over TCP, for networks that drop broadcast.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable

from . import protocol
from .errors import ClambsError
from .metrics import AgentDescriptor
from .transport import FramedClient

log = logging.getLogger(__name__)

DEFAULT_DISCOVERY_PORT = 7400


class DiscoveryResponder:
    """Agent-side UDP listener. Many responders may share one port."""

    def __init__(self, port: int, descriptor: Callable[[], AgentDescriptor],
                 bind_host: str = ""):
        self.descriptor = descriptor
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        self.sock.settimeout(0.2)
        self.sock.bind((bind_host, port))
        self.port = self.sock.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"discovery-{port}")

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=2)
        self.sock.close()

    def _run(self):
        while not self._stop.is_set():
            try:
                data, src = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                msg = protocol.decode_datagram(data)
            except ClambsError:
                continue
            if not isinstance(msg, protocol.Probe):
                continue
            try:
                reply = protocol.encode_datagram(protocol.Announce(self.descriptor()))
                self.sock.sendto(reply, (msg.manager_addr, msg.manager_port))
            except OSError as exc:
                log.debug("announce to %s failed: %s", src, exc)


def broadcast_probe(broadcast_addr: str, discovery_port: int, window_ms: int,
                    reply_host: str = "127.0.0.1") -> list[AgentDescriptor]:
    """Send one Probe and collect Announce datagrams for ``window_ms``."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    found = []
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        sock.bind(("", 0))
        reply_port = sock.getsockname()[1]
        probe = protocol.encode_datagram(protocol.Probe(reply_host, reply_port))
        try:
            sock.sendto(probe, (broadcast_addr, discovery_port))
        except OSError as exc:
            log.warning("discovery broadcast to %s:%s failed: %s",
                        broadcast_addr, discovery_port, exc)
            return found
        deadline = time.monotonic() + window_ms / 1000.0
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                break
            sock.settimeout(left)
            try:
                data, _ = sock.recvfrom(65535)
            except socket.timeout:
                break
            try:
                msg = protocol.decode_datagram(data)
            except ClambsError:
                continue
            if isinstance(msg, protocol.Announce):
                found.append(msg.descriptor)
    finally:
        sock.close()
    return found


def scan_probe(targets: Iterable[tuple[str, int]], reply_host: str = "127.0.0.1",
               timeout: float = 1.0, workers: int = 32) -> list[AgentDescriptor]:
    targets = list(targets)
    if not targets:
        return []

    def one(addr):
        try:
            with FramedClient(addr[0], addr[1], timeout=timeout) as c:
                reply = c.request(protocol.Probe(reply_host, 1))
            if isinstance(reply, protocol.Announce):
                return reply.descriptor
        except (OSError, ClambsError):
            pass
        return None

    with ThreadPoolExecutor(max_workers=min(workers, len(targets))) as pool:
        return [d for d in pool.map(one, targets) if d is not None]


def dedupe(descriptors: Iterable[AgentDescriptor]) -> list[AgentDescriptor]:
    seen = {}
    for d in descriptors:
        seen.setdefault((d.host, d.port), d)
    return list(seen.values())
