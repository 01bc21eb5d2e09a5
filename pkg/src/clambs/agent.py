"""Monitoring agent daemon: answers OID-addressed QoS queries (pull) or pushes on a timer."""
from __future__ import annotations

import json
import logging
import signal
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional, Union

from . import config as cfg
from . import protocol
from .backends import CollectorBackend, make_backend
from .discovery import DEFAULT_DISCOVERY_PORT, DiscoveryResponder
from .errors import ClambsError, ProcessNotFound, UnknownOid
from .metrics import (
    PROCESS_KINDS, REGISTRY, SYSTEM_KINDS, AgentDescriptor, AgentKind, MetricKind,
    QoSSample, as_oid, default_agent_id, now_ms,
)
from .overhead.model import should_report
from .transport import Connection, FramedClient, FramedServer

log = logging.getLogger(__name__)

MIN_PUSH_INTERVAL_MS = 100
PENDING_LIMIT = 100


@dataclass
class AgentConfig:
    listen_port: int = 8000
    listen_host: str = "127.0.0.1"
    monitored_processes: list[str] = field(default_factory=list)
    system_processes: list[str] = field(default_factory=list)
    mode: str = "pull"
    manager_addr: Optional[tuple[str, int]] = None
    push_interval_ms: int = 1000
    backend: Union[str, CollectorBackend] = "osprobe"
    discovery_port: int = DEFAULT_DISCOVERY_PORT
    metrics: Optional[list[MetricKind]] = None
    push_threshold: float = 0.0
    agent_id: Optional[str] = None

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in ("pull", "push"):
            raise cfg.ConfigError(f"mode must be pull or push, got {self.mode!r}")
        if self.mode == "push":
            if self.manager_addr is None:
                raise cfg.ConfigError("push mode needs manager_addr")
            if self.push_interval_ms < MIN_PUSH_INTERVAL_MS:
                raise cfg.ConfigError(
                    f"push_interval_ms must be >= {MIN_PUSH_INTERVAL_MS}")
        if self.push_threshold < 0:
            raise cfg.ConfigError("push_threshold must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> AgentConfig:
        manager = values.get("manager_addr")
        metrics = cfg.get_list(values, "metrics")
        return cls(
            listen_port=cfg.get_int(values, "listen_port", 8000),
            listen_host=values.get("listen_host") or "127.0.0.1",
            monitored_processes=cfg.get_list(values, "processes"),
            system_processes=cfg.get_list(values, "system_processes"),
            mode=values.get("mode") or "pull",
            manager_addr=cfg.parse_hostport(manager) if manager else None,
            push_interval_ms=cfg.get_int(values, "push_interval_ms", 1000),
            backend=values.get("backend") or "osprobe",
            discovery_port=cfg.get_int(values, "discovery_port", DEFAULT_DISCOVERY_PORT),
            metrics=[MetricKind(m) for m in metrics] or None,
            push_threshold=cfg.get_float(values, "push_threshold", 0.0),
            agent_id=values.get("agent_id") or None,
        )


class MonitoringAgent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.backend = (make_backend(config.backend) if isinstance(config.backend, str)
                        else config.backend)
        self.server: Optional[FramedServer] = None
        self.responder: Optional[DiscoveryResponder] = None
        self._port = config.listen_port
        self._stop = threading.Event()
        self._push_thread: Optional[threading.Thread] = None
        self._push_client: Optional[FramedClient] = None
        self._pending: list[protocol.PushReport] = []
        self._last_pushed: dict = {}
        self._seq = 0
        self.reports_sent = 0

    # identity

    @property
    def agent_id(self) -> str:
        return self.config.agent_id or default_agent_id(self.config.listen_host, self._port)

    @property
    def port(self) -> int:
        return self._port

    def metric_kinds(self) -> list[MetricKind]:
        if self.config.metrics:
            return list(self.config.metrics)
        supported = self.backend.kinds()
        kinds = [k for k in SYSTEM_KINDS if supported is None or k in supported]
        if self.config.monitored_processes or self.config.system_processes:
            kinds += [k for k in PROCESS_KINDS if supported is None or k in supported]
        return kinds

    @property
    def descriptor(self) -> AgentDescriptor:
        return AgentDescriptor(
            agent_id=self.agent_id,
            host=self.config.listen_host,
            port=self._port,
            kind=AgentKind.Monitoring,
            oids=tuple(REGISTRY.oid_of(k) for k in self.metric_kinds()),
            processes=tuple(self.config.monitored_processes),
            system_processes=tuple(self.config.system_processes),
        )

    # collection

    def collect(self, oid, process_name: Optional[str] = None) -> QoSSample:
        kind = REGISTRY.lookup(oid)
        if kind.is_process and not process_name:
            raise ProcessNotFound(f"{kind.name} needs a process name")
        if kind.is_bench:
            raise UnknownOid(f"{as_oid(oid)} is not served by a monitoring agent")
        value = self.backend.read(kind, process_name if kind.is_process else None)
        return QoSSample(
            agent_id=self.agent_id,
            oid=as_oid(oid),
            value=value,
            units=kind.units,
            timestamp_utc_ms=now_ms(),
            process=process_name if kind.is_process else None,
        )

    def answer(self, request: protocol.QoSRequest) -> protocol.QoSResponse:
        samples = tuple(self.collect(o, request.process_name) for o in request.oids)
        return protocol.QoSResponse(self.agent_id, samples)

    def snapshot(self) -> list[QoSSample]:
        """One sample per configured metric (per process for Proc* kinds)."""
        out = []
        procs = list(self.config.monitored_processes) + list(self.config.system_processes)
        for kind in self.metric_kinds():
            oid = REGISTRY.oid_of(kind)
            if kind.is_process:
                for p in procs:
                    out.append(self.collect(oid, p))
            else:
                out.append(self.collect(oid))
        return out

    # network handlers

    def handle(self, msg, conn: Connection):
        if isinstance(msg, protocol.QoSRequest):
            return self.answer(msg)
        if isinstance(msg, protocol.Probe):
            return protocol.Announce(self.descriptor)
        return protocol.Error("Unsupported", f"monitoring agent does not accept "
                                             f"{type(msg).__name__}")

    def handle_http(self, path: str, query: dict):
        if path == "/descriptor":
            return 200, "application/json", json.dumps(self.descriptor.to_dict()).encode()
        if path != "/qos":
            return 404, "text/plain", b"not found\n"
        oids = query.get("oid") or []
        process = (query.get("process") or [None])[0]
        if not oids:
            return 400, "text/plain", b"at least one oid parameter is required\n"
        lines = []
        for o in oids:
            s = self.collect(as_oid(o), process)
            row = [s.agent_id, str(s.oid), s.value, s.units.value, s.timestamp_utc_ms]
            if s.process is not None:
                row.append(s.process)
            lines.append(json.dumps(row))
        return 200, "text/plain; charset=utf-8", ("\n".join(lines) + "\n").encode()

    # lifecycle

    def start(self) -> MonitoringAgent:
        self.server = FramedServer(self.config.listen_host, self.config.listen_port,
                                   self.handle, self.handle_http,
                                   name=f"agent-{self.config.listen_port}")
        self._port = self.server.port
        self.server.start()
        if self.config.discovery_port:
            try:
                self.responder = DiscoveryResponder(
                    self.config.discovery_port, lambda: self.descriptor).start()
            except OSError as exc:
                log.warning("discovery listener unavailable on %s: %s",
                            self.config.discovery_port, exc)
        if self.config.mode == "push":
            self._push_thread = threading.Thread(target=self._push_loop, daemon=True,
                                                 name=f"push-{self._port}")
            self._push_thread.start()
        log.info("agent %s listening (%s mode)", self.agent_id, self.config.mode)
        return self

    def stop(self):
        self._stop.set()
        if self._push_thread is not None:
            self._push_thread.join(timeout=5)
        if self.responder is not None:
            self.responder.stop()
        if self.server is not None:
            self.server.stop()
        if self._push_client is not None:
            self._push_client.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # push mode

    def build_report(self) -> Optional[protocol.PushReport]:
        samples = []
        for s in self.snapshot():
            key = (str(s.oid), s.process)
            if should_report(self._last_pushed.get(key), s.value, self.config.push_threshold):
                samples.append(s)
                self._last_pushed[key] = s.value
        if not samples:
            return None
        self._seq += 1
        return protocol.PushReport(
            report_id=f"{self.agent_id}/{uuid.uuid4().hex[:12]}/{self._seq}",
            agent_id=self.agent_id,
            samples=tuple(samples),
            descriptor=self.descriptor,
        )

    def _push_loop(self):
        interval = self.config.push_interval_ms / 1000.0
        host, port = self.config.manager_addr
        self._push_client = FramedClient(host, port, timeout=max(2.0, 2 * interval))
        next_at = time.monotonic() + interval
        while not self._stop.wait(max(0.0, next_at - time.monotonic())):
            next_at += interval
            try:
                report = self.build_report()
            except ClambsError as exc:
                log.warning("push collection failed: %s", exc)
                report = None
            if report is not None:
                self._pending.append(report)
                del self._pending[:-PENDING_LIMIT]
            self._flush_pending()

    def _flush_pending(self):
        while self._pending:
            report = self._pending[0]
            try:
                ack = self._push_client.request(report)
            except (OSError, ClambsError) as exc:
                log.debug("push to manager failed, will retry: %s", exc)
                return
            if isinstance(ack, protocol.PushReport) and ack.report_id == report.report_id:
                self._pending.pop(0)
                self.reports_sent += 1
            else:
                return


def load_agent_config(path=None, **overrides) -> AgentConfig:
    values = cfg.load_config_file(path) if path else {}
    return AgentConfig.from_mapping(cfg.merge(values, overrides))


def serve(config: AgentConfig, stop_event: Optional[threading.Event] = None):
    """Run an agent until SIGINT/SIGTERM (or ``stop_event``)."""
    stop_event = stop_event or threading.Event()
    _install_signal_handlers(stop_event)
    agent = MonitoringAgent(config).start()
    try:
        wait_for_stop(stop_event)
    finally:
        agent.stop()


def wait_for_stop(stop_event: threading.Event, tick: float = 0.5):
    # an untimed wait can miss a signal the kernel hands to a worker thread
    while not stop_event.wait(tick):
        pass


def _install_signal_handlers(stop_event: threading.Event):
    if threading.current_thread() is not threading.main_thread():
        return
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop_event.set())
