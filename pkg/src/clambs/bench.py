"""Benchmarking agent: timed download/upload transfers and remote-controlled load runs.

Transfer exchange on one connection::

    client -> BenchRequest
    agent  -> BenchRequest (echo: accepted)  |  Error (e.g. SizeExceeded)
    Download: agent streams size_bytes raw, then BenchResponse
    Upload:   client streams size_bytes raw, agent answers BenchResponse

The requester times the exchange itself, from connect to completion, so its
report includes connection setup and request latency.
"""
from __future__ import annotations

import hashlib
import logging
import random
import socket
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Iterator, Optional

from . import config as cfg
from . import protocol
from .discovery import DEFAULT_DISCOVERY_PORT, DiscoveryResponder
from .errors import ClambsError, MalformedFrame, PeerDisconnected, RemoteError, SizeExceeded
from .loadgen import run_load
from .metrics import AgentDescriptor, AgentKind, default_agent_id, now_ms
from .transport import Connection, FramedServer
from .workload import BenchmarkReport, Direction, LoadReport, TransferSpec, WorkloadSpec

log = logging.getLogger(__name__)

PAYLOAD_SEED = 20140101
CHUNK = 64 * 1024
DEFAULT_MAX_TRANSFER = 256 * 1024 * 1024
KB, MB = 1024, 1024 * 1024
DEFAULT_SIZES = (1 * MB, 4 * MB, 16 * MB)
DEFAULT_BENCH_INTERVAL_MS = 10_000


def payload_chunks(size: int, seed: int = PAYLOAD_SEED, chunk: int = CHUNK) -> Iterator[bytes]:
    """Deterministic pseudo-random payload; equal sizes give identical bytes."""
    rng = random.Random(seed)
    left = size
    while left > 0:
        n = min(chunk, left)
        yield rng.randbytes(n)
        left -= n


def payload_digest(size: int, seed: int = PAYLOAD_SEED) -> str:
    h = hashlib.sha256()
    for c in payload_chunks(size, seed):
        h.update(c)
    return h.hexdigest()


@dataclass
class BenchAgentConfig:
    listen_port: int = 80
    listen_host: str = "127.0.0.1"
    max_transfer_bytes: int = DEFAULT_MAX_TRANSFER
    discovery_port: int = DEFAULT_DISCOVERY_PORT
    agent_id: Optional[str] = None

    @classmethod
    def from_mapping(cls, values: dict) -> BenchAgentConfig:
        return cls(
            listen_port=cfg.get_int(values, "listen_port", 80),
            listen_host=values.get("listen_host") or "127.0.0.1",
            max_transfer_bytes=cfg.get_int(values, "max_transfer_bytes", DEFAULT_MAX_TRANSFER),
            discovery_port=cfg.get_int(values, "discovery_port", DEFAULT_DISCOVERY_PORT),
            agent_id=values.get("agent_id") or None,
        )


class _LoadRun:
    def __init__(self, run_id: str, spec: WorkloadSpec):
        self.run_id = run_id
        self.spec = spec
        self.stop = threading.Event()
        self.report: Optional[LoadReport] = None
        self.thread = threading.Thread(target=self._run, daemon=True, name=f"loadrun-{run_id}")

    def _run(self):
        self.report = run_load(self.spec, self.stop)


class BenchmarkingAgent:
    def __init__(self, config: BenchAgentConfig):
        self.config = config
        self.server: Optional[FramedServer] = None
        self.responder: Optional[DiscoveryResponder] = None
        self._port = config.listen_port
        self._runs: dict[str, _LoadRun] = {}
        self._lock = threading.Lock()
        self.reports: list[BenchmarkReport] = []

    @property
    def port(self) -> int:
        return self._port

    @property
    def agent_id(self) -> str:
        return self.config.agent_id or default_agent_id(self.config.listen_host, self._port)

    @property
    def descriptor(self) -> AgentDescriptor:
        return AgentDescriptor(self.agent_id, self.config.listen_host, self._port,
                               AgentKind.Benchmarking)

    def serve_transfer(self, spec: TransferSpec, conn: Connection) -> BenchmarkReport:
        if spec.size_bytes > self.config.max_transfer_bytes:
            raise SizeExceeded(f"{spec.size_bytes} bytes exceeds the "
                               f"{self.config.max_transfer_bytes}-byte cap")
        conn.send(protocol.BenchRequest(spec))
        if spec.direction is Direction.Download:
            t0 = time.perf_counter()
            for chunk in payload_chunks(spec.size_bytes):
                conn.send_bytes(chunk)
            elapsed = time.perf_counter() - t0
        else:
            first = conn.read(1)
            if not first:
                raise PeerDisconnected("peer sent no upload payload")
            t0 = time.perf_counter()
            left = spec.size_bytes - 1
            while left > 0:
                data = conn.read(min(CHUNK, left))
                if not data:
                    raise PeerDisconnected(
                        f"upload stopped after {spec.size_bytes - left} bytes")
                left -= len(data)
            elapsed = time.perf_counter() - t0
        report = BenchmarkReport.measured(spec, elapsed * 1000.0, conn.peer, now_ms())
        with self._lock:
            self.reports.append(report)
        return report

    def start_load(self, run_id: str, spec: WorkloadSpec) -> None:
        with self._lock:
            if run_id in self._runs:
                raise ClambsError(f"load run {run_id!r} already exists")
            run = self._runs[run_id] = _LoadRun(run_id, spec)
        run.thread.start()

    def stop_load(self, run_id: str, wait: bool = True) -> LoadReport:
        with self._lock:
            run = self._runs.get(run_id)
        if run is None:
            raise ClambsError(f"unknown load run {run_id!r}")
        if not wait:
            run.stop.set()
        run.thread.join()
        with self._lock:
            self._runs.pop(run_id, None)
        return run.report

    def handle(self, msg, conn: Connection):
        if isinstance(msg, protocol.Probe):
            return protocol.Announce(self.descriptor)
        if isinstance(msg, protocol.BenchRequest):
            # a partial upload raises PeerDisconnected: no report, Error frame instead
            return protocol.BenchResponse(self.serve_transfer(msg.spec, conn))
        if isinstance(msg, protocol.LoadStart):
            self.start_load(msg.run_id, msg.workload)
            return msg
        if isinstance(msg, protocol.LoadStop):
            return protocol.LoadStop(msg.run_id, msg.wait, self.stop_load(msg.run_id, msg.wait))
        return protocol.Error("Unsupported", f"benchmarking agent does not accept "
                                             f"{type(msg).__name__}")

    def start(self) -> BenchmarkingAgent:
        self.server = FramedServer(self.config.listen_host, self.config.listen_port,
                                   self.handle, name=f"bench-{self.config.listen_port}")
        self._port = self.server.port
        self.server.start()
        if self.config.discovery_port:
            try:
                self.responder = DiscoveryResponder(
                    self.config.discovery_port, lambda: self.descriptor).start()
            except OSError as exc:
                log.warning("discovery listener unavailable: %s", exc)
        return self

    def stop(self):
        with self._lock:
            runs = list(self._runs.values())
        for r in runs:
            r.stop.set()
        if self.responder is not None:
            self.responder.stop()
        if self.server is not None:
            self.server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# requester side


def _expect(conn: Connection, cls):
    reply = conn.recv()
    if isinstance(reply, protocol.Error):
        raise RemoteError(reply.code, reply.message)
    if not isinstance(reply, cls):
        raise MalformedFrame(f"expected {cls.__name__}, got {type(reply).__name__}")
    return reply


def request_transfer(host: str, port: int, spec: TransferSpec, timeout: float = 600.0,
                     verify: bool = True) -> BenchmarkReport:
    """Run one transfer against a benchmarking agent and time it from this side."""
    t0 = time.perf_counter()
    sock = socket.create_connection((host, port), timeout=timeout)
    conn = Connection(sock)
    try:
        conn.send(protocol.BenchRequest(spec))
        _expect(conn, protocol.BenchRequest)
        if spec.direction is Direction.Download:
            h = hashlib.sha256()
            left = spec.size_bytes
            while left > 0:
                data = conn.read(min(CHUNK, left))
                if not data:
                    raise PeerDisconnected(f"download stopped with {left} bytes missing")
                h.update(data)
                left -= len(data)
            elapsed = time.perf_counter() - t0
            _expect(conn, protocol.BenchResponse)
            if verify and h.hexdigest() != payload_digest(spec.size_bytes):
                raise ClambsError("downloaded payload failed its checksum")
        else:
            for chunk in payload_chunks(spec.size_bytes):
                conn.send_bytes(chunk)
            _expect(conn, protocol.BenchResponse)
            elapsed = time.perf_counter() - t0
    finally:
        conn.close()
    return BenchmarkReport.measured(spec, elapsed * 1000.0, default_agent_id(host, port),
                                    now_ms())


def remote_load(host: str, port: int, spec: WorkloadSpec, timeout: float = 3600.0) -> LoadReport:
    """Start a load run on a benchmarking agent and wait for its report."""
    run_id = uuid.uuid4().hex
    sock = socket.create_connection((host, port), timeout=timeout)
    conn = Connection(sock)
    try:
        conn.send(protocol.LoadStart(run_id, spec))
        _expect(conn, protocol.LoadStart)
        conn.send(protocol.LoadStop(run_id, wait=True))
        return _expect(conn, protocol.LoadStop).report
    finally:
        conn.close()


def load_bench_config(path=None, **overrides) -> BenchAgentConfig:
    values = cfg.load_config_file(path) if path else {}
    return BenchAgentConfig.from_mapping(cfg.merge(values, overrides))


def serve(config: BenchAgentConfig, stop_event: Optional[threading.Event] = None):
    """Run a benchmarking agent until SIGINT/SIGTERM (or ``stop_event``)."""
    from .agent import _install_signal_handlers, wait_for_stop

    stop_event = stop_event or threading.Event()
    _install_signal_handlers(stop_event)
    agent = BenchmarkingAgent(config).start()
    try:
        wait_for_stop(stop_event)
    finally:
        agent.stop()
