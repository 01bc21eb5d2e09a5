"""Manager: discovers agents, polls or ingests their samples, runs benchmarks, serves queries."""
from __future__ import annotations

import enum
import json
import logging
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from . import config as cfg
from . import discovery, protocol
from .agent import _install_signal_handlers, wait_for_stop
from .bench import DEFAULT_BENCH_INTERVAL_MS, request_transfer
from .errors import BadFilter, ClambsError, NoData
from .metrics import (
    REGISTRY, AgentDescriptor, AgentKind, Classification, MetricKind, QoSSample,
    Units, classify, now_ms, parse_oid,
)
from .store import SampleStore, StoredSample
from .transport import FramedClient, FramedServer
from .workload import BenchmarkReport, Direction, TransferSpec

log = logging.getLogger(__name__)

MIN_POLL_INTERVAL_MS = 100
FAILURES_BEFORE_UNREACHABLE = 3
MAX_BACKOFF_MS = 60_000


@dataclass
class ManagerConfig:
    discovery_broadcast_addr: str = "255.255.255.255"
    discovery_port: int = discovery.DEFAULT_DISCOVERY_PORT
    poll_interval_ms: int = 1000
    store_path: str = "clambs-samples.log"
    bench_interval_ms: int = DEFAULT_BENCH_INTERVAL_MS
    listen_host: str = "127.0.0.1"
    listen_port: int = 7000
    discovery_window_ms: int = 2000
    scan_targets: list[tuple[str, int]] = field(default_factory=list)
    fsync: bool = False
    # periodic benchmarking against discovered benchmarking agents; 0 disables
    bench_size_bytes: int = 0
    bench_repeats: int = 1

    def __post_init__(self):
        if self.poll_interval_ms < MIN_POLL_INTERVAL_MS:
            raise cfg.ConfigError(f"poll_interval_ms must be >= {MIN_POLL_INTERVAL_MS}")
        if self.bench_interval_ms < 1:
            raise cfg.ConfigError("bench_interval_ms must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> ManagerConfig:
        scan = values.get("scan_targets")
        return cls(
            discovery_broadcast_addr=values.get("discovery_broadcast_addr") or "255.255.255.255",
            discovery_port=cfg.get_int(values, "discovery_port",
                                       discovery.DEFAULT_DISCOVERY_PORT),
            poll_interval_ms=cfg.get_int(values, "poll_interval_ms", 1000),
            store_path=values.get("store_path") or "clambs-samples.log",
            bench_interval_ms=cfg.get_int(values, "bench_interval_ms",
                                          DEFAULT_BENCH_INTERVAL_MS),
            listen_host=values.get("listen_host") or "127.0.0.1",
            listen_port=cfg.get_int(values, "listen_port", 7000),
            discovery_window_ms=cfg.get_int(values, "discovery_window_ms", 2000),
            scan_targets=cfg.parse_scan_targets(scan) if scan else [],
            fsync=str(values.get("fsync", "false")).lower() in ("1", "true", "yes"),
            bench_size_bytes=cfg.get_int(values, "bench_size_bytes", 0),
            bench_repeats=cfg.get_int(values, "bench_repeats", 1),
        )


def load_manager_config(path=None, **overrides) -> ManagerConfig:
    values = cfg.load_config_file(path) if path else {}
    return ManagerConfig.from_mapping(cfg.merge(values, overrides))


class AgentStatus(enum.Enum):
    Active = "Active"
    Unreachable = "Unreachable"


@dataclass
class AgentState:
    descriptor: AgentDescriptor
    status: AgentStatus = AgentStatus.Active
    consecutive_failures: int = 0
    next_due: float = 0.0
    polls_ok: int = 0
    polls_failed: int = 0
    last_error: str = ""
    client: Optional[FramedClient] = None
    # registered through a push report; such agents are never polled
    pushes: bool = False

    def to_dict(self):
        d = self.descriptor.to_dict()
        d.update(status=self.status.value, polls_ok=self.polls_ok,
                 polls_failed=self.polls_failed, last_error=self.last_error)
        return d


@dataclass(frozen=True)
class PushAck:
    report_id: str
    stored: int
    duplicate: bool


@dataclass
class BenchmarkOutcome:
    reports: list[BenchmarkReport]
    failed: dict[str, str]  # agent_id -> error

    def by_agent(self, agents: Iterable[AgentDescriptor]) -> dict[AgentDescriptor, list]:
        out = {a: [] for a in agents}
        ids = {a.agent_id: a for a in out}
        for r in self.reports:
            if r.peer in ids:
                out[ids[r.peer]].append(r)
        return out


def backoff_ms(interval_ms: int, failures: int) -> int:
    """Retry delay once an agent is unreachable: doubles per failure, capped."""
    if failures < FAILURES_BEFORE_UNREACHABLE:
        return interval_ms
    return min(MAX_BACKOFF_MS, interval_ms * 2 ** (failures - FAILURES_BEFORE_UNREACHABLE + 1))


def select_best_site(reports_by_agent: Mapping):
    """Agent with the highest mean bandwidth.

    Ties go to the lower mean elapsed time, then the smaller agent id.
    """
    ranked = []
    for agent, reports in reports_by_agent.items():
        if not reports:
            continue
        k = len(reports)
        mean_bw = sum(Fraction(r.bandwidth_bytes_per_s) for r in reports) / k
        mean_el = sum(Fraction(r.elapsed_ms) for r in reports) / k
        agent_id = agent.agent_id if isinstance(agent, AgentDescriptor) else str(agent)
        ranked.append((-mean_bw, mean_el, agent_id, agent))
    if not ranked:
        raise NoData("no agent produced a successful benchmark report")
    ranked.sort(key=lambda r: r[:3])
    return ranked[0][3]


class Manager:
    def __init__(self, config: ManagerConfig):
        self.config = config
        self.store = SampleStore(config.store_path, fsync=config.fsync)
        self.agents: dict[tuple[str, int], AgentState] = {}
        self._lock = threading.Lock()
        self._ingest_lock = threading.Lock()
        self._stop = threading.Event()
        self._pollers: dict[str, threading.Thread] = {}
        self._bench_thread: Optional[threading.Thread] = None
        self.server: Optional[FramedServer] = None
        self.polling = False
        self.missed_rounds = 0
        self.started_at = time.monotonic()

    # registry

    def register(self, desc: AgentDescriptor, pushes: bool = False) -> bool:
        """Record an agent; returns False when (host, port) was already known."""
        with self._lock:
            key = (desc.host, desc.port)
            if key in self.agents:
                return False
            self.agents[key] = AgentState(desc, pushes=pushes)
            start_poller = (self.polling and not pushes and desc.kind is AgentKind.Monitoring
                            and desc.host not in self._pollers)
            if start_poller:
                self._spawn_poller(desc.host)
        return True

    def monitoring_agents(self, host: Optional[str] = None,
                          polled_only: bool = False) -> list[AgentState]:
        with self._lock:
            return [s for s in self.agents.values()
                    if s.descriptor.kind is AgentKind.Monitoring
                    and (host is None or s.descriptor.host == host)
                    and not (polled_only and s.pushes)]

    def benchmarking_agents(self) -> list[AgentDescriptor]:
        with self._lock:
            return [s.descriptor for s in self.agents.values()
                    if s.descriptor.kind is AgentKind.Benchmarking]

    def discover(self, window_ms: Optional[int] = None) -> list[AgentDescriptor]:
        window = self.config.discovery_window_ms if window_ms is None else window_ms
        reply_host = self.config.listen_host
        if reply_host in ("", "0.0.0.0"):
            reply_host = "127.0.0.1"
        found = []
        scan = threading.Thread(
            target=lambda: found.extend(discovery.scan_probe(self.config.scan_targets,
                                                             reply_host)),
            daemon=True)
        scan.start()
        found.extend(discovery.broadcast_probe(self.config.discovery_broadcast_addr,
                                               self.config.discovery_port, window,
                                               reply_host))
        scan.join()
        descs = discovery.dedupe(found)
        for d in descs:
            self.register(d)
        log.info("discovered %d agents", len(descs))
        return descs

    # storage

    def _classify(self, desc: Optional[AgentDescriptor], sample: QoSSample) -> Classification:
        try:
            kind = REGISTRY.lookup(sample.oid)
        except ClambsError:
            return Classification.SystemResource
        return classify(kind, sample.process, desc.processes if desc else ())

    def store_samples(self, desc: Optional[AgentDescriptor], samples: Sequence[QoSSample],
                      report_id: Optional[str] = None) -> int:
        return self.store.append(((s, self._classify(desc, s)) for s in samples), report_id)

    def query(self, agent_id=None, oid=None, from_ms=None, to_ms=None,
              classification=None) -> list[StoredSample]:
        return self.store.query(agent_id, oid, from_ms, to_ms, classification)

    # pull

    def poll_requests(self, desc: AgentDescriptor) -> list[protocol.QoSRequest]:
        system, per_proc = [], []
        for o in desc.oids:
            try:
                kind = REGISTRY.lookup(o)
            except ClambsError:
                continue
            (per_proc if kind.is_process else system).append(o)
        reqs = [protocol.QoSRequest(tuple(system))] if system else []
        if per_proc:
            for p in tuple(desc.processes) + tuple(desc.system_processes):
                reqs.append(protocol.QoSRequest(tuple(per_proc), p))
        return reqs

    def poll_agent(self, state: AgentState) -> bool:
        desc = state.descriptor
        if state.client is None:
            state.client = FramedClient(desc.host, desc.port,
                                        timeout=max(1.0, 2 * self.config.poll_interval_ms / 1000))
        samples = []
        try:
            for req in self.poll_requests(desc):
                reply = state.client.request(req)
                if not isinstance(reply, protocol.QoSResponse):
                    raise ClambsError(f"unexpected reply {type(reply).__name__}")
                samples.extend(reply.samples)
        except (OSError, ClambsError) as exc:
            state.client.close()
            self._record_failure(state, str(exc) or type(exc).__name__)
            return False
        self.store_samples(desc, samples)
        with self._lock:
            state.polls_ok += 1
            state.consecutive_failures = 0
            state.status = AgentStatus.Active
            state.last_error = ""
        return True

    def _record_failure(self, state: AgentState, err: str):
        with self._lock:
            state.polls_failed += 1
            state.consecutive_failures += 1
            state.last_error = err
            if state.consecutive_failures >= FAILURES_BEFORE_UNREACHABLE:
                if state.status is not AgentStatus.Unreachable:
                    log.warning("agent %s unreachable: %s", state.descriptor.agent_id, err)
                state.status = AgentStatus.Unreachable
            delay = backoff_ms(self.config.poll_interval_ms, state.consecutive_failures)
            state.next_due = time.monotonic() + delay / 1000.0

    def _poll_host(self, host: str):
        interval = self.config.poll_interval_ms / 1000.0
        next_tick = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            for state in self.monitoring_agents(host, polled_only=True):
                if self._stop.is_set():
                    break
                if state.next_due <= now + interval / 2:
                    self.poll_agent(state)
                    if state.consecutive_failures == 0:
                        state.next_due = 0.0
            next_tick += interval
            behind = time.monotonic() - next_tick
            if behind > 0:
                skipped = int(behind // interval) + 1
                with self._lock:
                    self.missed_rounds += skipped
                next_tick += skipped * interval
            self._stop.wait(max(0.0, next_tick - time.monotonic()))
        for state in self.monitoring_agents(host):
            if state.client is not None:
                state.client.close()

    def _spawn_poller(self, host: str):
        t = threading.Thread(target=self._poll_host, args=(host,), daemon=True,
                             name=f"poller-{host}")
        self._pollers[host] = t
        t.start()

    def start_polling(self):
        with self._lock:
            self.polling = True
            hosts = {s.descriptor.host for s in self.agents.values()
                     if s.descriptor.kind is AgentKind.Monitoring and not s.pushes}
            for h in sorted(hosts):
                if h not in self._pollers:
                    self._spawn_poller(h)

    # push

    def ingest_push(self, report: protocol.PushReport) -> PushAck:
        with self._ingest_lock:
            if self.store.has_report(report.report_id):
                return PushAck(report.report_id, 0, True)
            desc = report.descriptor
            with self._lock:
                known = next((s.descriptor for s in self.agents.values()
                              if s.descriptor.agent_id == report.agent_id), None)
            if known is None:
                desc = desc or _descriptor_from_samples(report)
                if desc is not None:
                    self.register(desc, pushes=True)
            else:
                desc = known
            n = self.store_samples(desc, report.samples, report.report_id)
        return PushAck(report.report_id, n, False)

    # benchmarking

    def orchestrate_benchmark(self, agents: Sequence[AgentDescriptor], spec: TransferSpec,
                              repeats: int, timeout: float = 900.0) -> BenchmarkOutcome:
        """``repeats`` transfers per agent: sequential per agent, concurrent across agents."""
        outcome = BenchmarkOutcome([], {})
        if repeats <= 0 or not agents:
            return outcome

        def run(desc):
            got = []
            try:
                for _ in range(repeats):
                    got.append(request_transfer(desc.host, desc.port, spec, timeout=timeout))
            except (OSError, ClambsError) as exc:
                return got, f"{type(exc).__name__}: {exc}"
            return got, None

        with ThreadPoolExecutor(max_workers=len(agents)) as pool:
            results = list(pool.map(run, agents))
        bw_kind, lat_kind = {
            Direction.Download: (MetricKind.BenchDownloadBytesPerSecond,
                                 MetricKind.BenchDownloadLatencyMs),
            Direction.Upload: (MetricKind.BenchUploadBytesPerSecond,
                               MetricKind.BenchUploadLatencyMs),
        }[spec.direction]
        samples = []
        for desc, (got, err) in zip(agents, results):
            outcome.reports.extend(got)
            if err is not None:
                outcome.failed[desc.agent_id] = err
            if got:
                ts = now_ms()
                samples.append(QoSSample(desc.agent_id, REGISTRY.oid_of(bw_kind),
                                         statistics.fmean(r.bandwidth_bytes_per_s for r in got),
                                         bw_kind.units, ts))
                samples.append(QoSSample(desc.agent_id, REGISTRY.oid_of(lat_kind),
                                         statistics.fmean(r.elapsed_ms for r in got),
                                         lat_kind.units, ts))
        self.store_samples(None, samples)
        return outcome

    def _bench_loop(self):
        spec = TransferSpec(Direction.Download, self.config.bench_size_bytes)
        while not self._stop.wait(self.config.bench_interval_ms / 1000.0):
            agents = self.benchmarking_agents()
            if agents:
                self.orchestrate_benchmark(agents, spec, self.config.bench_repeats)

    # network surfaces

    def handle(self, msg, conn):
        if isinstance(msg, protocol.PushReport):
            self.ingest_push(msg)
            return protocol.PushReport(msg.report_id, msg.agent_id, ())
        if isinstance(msg, protocol.Announce):
            self.register(msg.descriptor)
            return msg
        return protocol.Error("Unsupported", f"manager does not accept {type(msg).__name__}")

    def stats(self) -> dict:
        with self._lock:
            states = list(self.agents.values())
            missed = self.missed_rounds
        return {
            "agents": len(states),
            "monitoring_agents": sum(s.descriptor.kind is AgentKind.Monitoring for s in states),
            "unreachable": sum(s.status is AgentStatus.Unreachable for s in states),
            "polls_ok": sum(s.polls_ok for s in states),
            "polls_failed": sum(s.polls_failed for s in states),
            "missed_rounds": missed,
            "samples": len(self.store),
            "uptime_s": time.monotonic() - self.started_at,
        }

    def handle_http(self, path: str, query: dict):
        if path == "/samples":
            q = {k: v[-1] for k, v in query.items()}
            try:
                rows = self.query(
                    agent_id=q.get("agent"),
                    oid=parse_oid(q["oid"]) if "oid" in q else None,
                    from_ms=int(q["from_ms"]) if "from_ms" in q else None,
                    to_ms=int(q["to_ms"]) if "to_ms" in q else None,
                    classification=Classification(q["class"]) if "class" in q else None,
                )
            except ValueError as exc:
                raise BadFilter(str(exc)) from None
            body = "".join(json.dumps(sample_row(r)) + "\n" for r in rows)
            return 200, "text/plain; charset=utf-8", body.encode()
        if path == "/agents":
            with self._lock:
                rows = [s.to_dict() for s in self.agents.values()]
            body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
            return 200, "text/plain; charset=utf-8", body.encode()
        if path == "/stats":
            return 200, "application/json", json.dumps(self.stats(), sort_keys=True).encode()
        return 404, "text/plain", b"not found\n"

    # lifecycle

    def start(self, discover: bool = True, poll: bool = True) -> Manager:
        self.server = FramedServer(self.config.listen_host, self.config.listen_port,
                                   self.handle, self.handle_http, name="manager")
        self.config.listen_port = self.server.port
        self.server.start()
        if discover:
            self.discover()
        if poll:
            self.start_polling()
        if self.config.bench_size_bytes > 0:
            self._bench_thread = threading.Thread(target=self._bench_loop, daemon=True,
                                                  name="bench-loop")
            self._bench_thread.start()
        return self

    def stop(self):
        self._stop.set()
        with self._lock:
            pollers = list(self._pollers.values())
        for t in pollers:
            t.join(timeout=10)
        if self.server is not None:
            self.server.stop()
        self.store.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def sample_row(rec: StoredSample) -> list:
    """Query-API line: agent_id, oid, value, units, timestamp, classification[, process]."""
    s = rec.sample
    row = [s.agent_id, str(s.oid), s.value, s.units.value, s.timestamp_utc_ms,
           rec.classification.value]
    if s.process is not None:
        row.append(s.process)
    return row


def parse_sample_row(line: str) -> StoredSample:
    row = json.loads(line)
    return StoredSample(
        QoSSample(row[0], parse_oid(row[1]), float(row[2]), Units(row[3]), int(row[4]),
                  row[6] if len(row) > 6 else None),
        Classification(row[5]),
    )


def _descriptor_from_samples(report: protocol.PushReport) -> Optional[AgentDescriptor]:
    host, _, port = report.agent_id.rpartition(":")
    try:
        p = int(port)
    except ValueError:
        return None
    if not host or not 0 < p < 65536:
        return None
    oids = tuple(dict.fromkeys(s.oid for s in report.samples))
    if not oids:
        return None
    return AgentDescriptor(report.agent_id, host, p, AgentKind.Monitoring, oids)


def serve(config: ManagerConfig, stop_event: Optional[threading.Event] = None) -> Manager:
    stop_event = stop_event or threading.Event()
    _install_signal_handlers(stop_event)
    mgr = Manager(config).start()
    try:
        wait_for_stop(stop_event)
    finally:
        mgr.stop()
    return mgr
