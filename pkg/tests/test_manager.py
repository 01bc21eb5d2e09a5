import json
import time
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from clambs import protocol
from clambs.bench import BenchAgentConfig, BenchmarkingAgent
from clambs.config import ConfigError
from clambs.errors import BadFilter, NoData
from clambs.harness import ThrottledProxy
from clambs.manager import (
    AgentStatus, Manager, ManagerConfig, backoff_ms, load_manager_config, parse_sample_row,
    select_best_site,
)
from clambs.metrics import (
    REGISTRY, AgentDescriptor, AgentKind, Classification, MetricKind, QoSSample, Units,
)
from clambs.transport import FramedClient, http_get
from clambs.workload import BenchmarkReport, Direction, TransferSpec

from conftest import free_port, synthetic_agent, wait_until

CPU = REGISTRY.oid_of(MetricKind.VmCpuPercent)


def make_manager(tmp_path, **kw) -> Manager:
    kw.setdefault("discovery_port", free_port_udp())
    kw.setdefault("discovery_window_ms", 300)
    return Manager(ManagerConfig(store_path=str(tmp_path / "samples.log"), listen_port=0, **kw))


def free_port_udp():
    import socket
    return free_port(socket.SOCK_DGRAM)


@pytest.fixture
def agents():
    started = []

    def make(n, host="127.0.0.1", base=None, **kw):
        out = []
        for k in range(n):
            port = base + k if base is not None else 0
            out.append(synthetic_agent(port=port, host=host, seed=len(started), **kw).start())
            started.append(out[-1])
        return out

    yield make
    for a in started:
        a.stop()


# discovery


def test_discover_three_agents_by_broadcast(tmp_path, agents, udp_port):
    live = agents(3, base=8000, discovery_port=udp_port)
    mgr = make_manager(tmp_path, discovery_port=udp_port)
    found = mgr.discover()
    assert sorted(d.port for d in found) == [8000, 8001, 8002]
    assert {d.agent_id for d in found} == {a.agent_id for a in live}
    mgr.store.close()


def test_discover_nothing(tmp_path):
    mgr = make_manager(tmp_path)
    assert mgr.discover() == []
    mgr.store.close()


def test_discover_dedups_double_announcements(tmp_path, agents, udp_port):
    (a,) = agents(1, discovery_port=udp_port)
    mgr = make_manager(tmp_path, discovery_port=udp_port,
                       scan_targets=[("127.0.0.1", a.port)] * 2)
    found = mgr.discover()
    assert [d.agent_id for d in found] == [a.agent_id]
    assert mgr.discover() == found and len(mgr.agents) == 1
    mgr.store.close()


def test_scan_fallback_without_broadcast(tmp_path, agents):
    live = agents(2)
    mgr = make_manager(tmp_path, scan_targets=[("127.0.0.1", a.port) for a in live]
                       + [("127.0.0.1", free_port())])
    assert len(mgr.discover()) == 2
    mgr.store.close()


# polling


def test_poll_five_agents_for_ten_seconds(tmp_path, agents, udp_port):
    live = agents(5, processes=("Tomcat7w.exe",), system_processes=("Lsass.exe",),
                  discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=1000) as mgr:
        assert len(mgr.agents) == 5
        time.sleep(10)
        stats = mgr.stats()
    assert stats["polls_failed"] == 0
    advertised = live[0].descriptor.oids
    for oid in advertised:
        kind = REGISTRY.lookup(oid)
        per_poll = 2 if kind.is_process else 1  # one per configured process
        got = len(mgr.store.query(oid=oid))
        assert got >= 45 * per_poll, (kind, got)


def test_scenario_iv_shape_polls_every_agent_each_round(tmp_path, agents, udp_port):
    for host, n in (("127.0.0.2", 1), ("127.0.0.3", 1), ("127.0.0.4", 3)):
        agents(n, host=host, base=8100, discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=200) as mgr:
        assert len(mgr.agents) == 5
        assert len(mgr._pollers) == 3
        time.sleep(2.1)
        counts = [s.polls_ok for s in mgr.agents.values()]
    assert min(counts) >= 9 and max(counts) - min(counts) <= 1


def test_killed_agent_is_isolated(tmp_path, agents, udp_port):
    live = agents(3, discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=200) as mgr:
        time.sleep(1.0)
        live[0].stop()
        stopped_at = time.time() * 1000
        time.sleep(2.0)
        states = {s.descriptor.agent_id: s for s in mgr.agents.values()}
    dead = states[live[0].agent_id]
    assert dead.status is AgentStatus.Unreachable and dead.polls_failed >= 3
    late = mgr.store.query(agent_id=live[0].agent_id, oid=CPU, from_ms=int(stopped_at) + 1)
    assert late == []
    for a in live[1:]:
        s = states[a.agent_id]
        assert s.status is AgentStatus.Active and s.polls_failed == 0
        assert s.polls_ok >= 13


def test_backoff_schedule():
    assert [backoff_ms(1000, f) for f in range(1, 9)] == \
        [1000, 1000, 2000, 4000, 8000, 16000, 32000, 60000]


def test_classification_filter(tmp_path, agents, udp_port):
    agents(1, processes=("Tomcat7w.exe",), system_processes=("Lsass.exe",),
           discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=200) as mgr:
        assert wait_until(lambda: mgr.stats()["polls_ok"] >= 2)
        user = mgr.query(classification=Classification.UserApplication)
        system = mgr.query(classification="SystemResource")
    assert user and all(r.sample.process == "Tomcat7w.exe" for r in user)
    assert all(REGISTRY.lookup(r.sample.oid).is_process for r in user)
    assert any(r.sample.process == "Lsass.exe" for r in system)
    assert any(r.sample.process is None for r in system)


def test_query_by_agent_and_bad_range(tmp_path, agents, udp_port):
    live = agents(2, discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=200) as mgr:
        assert wait_until(lambda: mgr.stats()["polls_ok"] >= 4)
        rows = mgr.query(agent_id=live[1].agent_id)
        assert rows and {r.sample.agent_id for r in rows} == {live[1].agent_id}
        with pytest.raises(BadFilter):
            mgr.query(from_ms=20, to_ms=10)
        port = mgr.config.listen_port
        status, body = http_get("127.0.0.1", port, "/samples?from_ms=20&to_ms=10")
        assert status == 400 and b"BadFilter" in body
        status, body = http_get("127.0.0.1", port, f"/samples?agent={live[0].agent_id}&oid={CPU}")
        got = [parse_sample_row(line) for line in body.decode().splitlines()]
        assert got and all(r.sample.oid == CPU for r in got)
        status, body = http_get("127.0.0.1", port, "/agents")
        assert len(body.decode().splitlines()) == 2


# push


def _report(rid, agent="10.1.1.1:8000", n=3):
    samples = tuple(QoSSample(agent, CPU, float(k), Units.Percent, 1000 + k) for k in range(n))
    return protocol.PushReport(rid, agent, samples)


def test_push_ingest_is_idempotent_and_registers(tmp_path):
    mgr = make_manager(tmp_path)
    ack = mgr.ingest_push(_report("r1"))
    assert (ack.stored, ack.duplicate) == (3, False) and len(mgr.store) == 3
    assert mgr.ingest_push(_report("r1")).duplicate and len(mgr.store) == 3
    assert [s.descriptor.agent_id for s in mgr.agents.values()] == ["10.1.1.1:8000"]
    mgr.store.close()
    # the dedup survives a restart
    again = make_manager(tmp_path)
    assert again.ingest_push(_report("r1")).duplicate and len(again.store) == 3
    again.store.close()


def test_push_agent_end_to_end(tmp_path, agents):
    with make_manager(tmp_path) as mgr:
        (a,) = agents(1, mode="push", manager_addr=("127.0.0.1", mgr.config.listen_port),
                      push_interval_ms=200)
        assert wait_until(lambda: a.reports_sent >= 3)
        assert a.agent_id in {s.descriptor.agent_id for s in mgr.agents.values()}
        assert mgr.monitoring_agents(polled_only=True) == []
        assert len(mgr.store.query(agent_id=a.agent_id, oid=CPU)) >= 3
        with FramedClient("127.0.0.1", mgr.config.listen_port) as c:
            ack = c.request(_report("x9", agent="10.9.9.9:1"))
        assert ack == protocol.PushReport("x9", "10.9.9.9:1", ())


# benchmarking


def _bench(**kw):
    return BenchmarkingAgent(BenchAgentConfig(listen_port=0, discovery_port=0, **kw)).start()


def test_orchestrate_and_pick_best(tmp_path):
    a, b = _bench(), _bench()
    mgr = make_manager(tmp_path)
    try:
        with ThrottledProxy("127.0.0.1", a.port, rate=256 * 1024) as pa, \
                ThrottledProxy("127.0.0.1", b.port, rate=128 * 1024) as pb:
            descs = [AgentDescriptor(f"127.0.0.1:{p.port}", "127.0.0.1", p.port,
                                     AgentKind.Benchmarking) for p in (pa, pb)]
            out = mgr.orchestrate_benchmark(descs, TransferSpec(Direction.Download, 64 * 1024),
                                            repeats=2)
        grouped = out.by_agent(descs)
        assert [len(v) for v in grouped.values()] == [2, 2] and out.failed == {}
        assert select_best_site(grouped) == descs[0]
        bw = mgr.query(oid=REGISTRY.oid_of(MetricKind.BenchDownloadBytesPerSecond))
        assert len(bw) == 2
    finally:
        a.stop()
        b.stop()
        mgr.store.close()


def test_orchestrate_zero_repeats_and_dead_agent(tmp_path):
    a = _bench()
    mgr = make_manager(tmp_path)
    dead_port = free_port()
    live = AgentDescriptor(f"127.0.0.1:{a.port}", "127.0.0.1", a.port, AgentKind.Benchmarking)
    dead = AgentDescriptor(f"127.0.0.1:{dead_port}", "127.0.0.1", dead_port,
                           AgentKind.Benchmarking)
    spec = TransferSpec(Direction.Download, 4096)
    try:
        assert mgr.orchestrate_benchmark([live, dead], spec, 0).reports == []
        out = mgr.orchestrate_benchmark([live, dead], spec, 2)
        assert {r.peer for r in out.reports} == {live.agent_id}
        assert list(out.failed) == [dead.agent_id]
    finally:
        a.stop()
        mgr.store.close()


def _reports(bw_elapsed):
    spec = TransferSpec(Direction.Download, 8192)
    return [BenchmarkReport(spec, el, spec.size_bytes / (el / 1000), "x", 0)
            for el in bw_elapsed]


def test_select_best_site_examples():
    A, B = "A", "B"
    # 8192 B/s vs 6144 B/s for 8 KiB payloads
    assert select_best_site({A: _reports([1000.0]), B: _reports([8192 / 6144 * 1000])}) == A
    assert select_best_site({B: _reports([500.0])}) == B
    with pytest.raises(NoData):
        select_best_site({A: [], B: []})


def test_select_best_site_tie_breaks_on_elapsed():
    spec_a, spec_b = TransferSpec(Direction.Download, 1000), TransferSpec(Direction.Download, 2000)
    a = [BenchmarkReport(spec_a, 1000.0, 1000.0, "A", 0)]
    b = [BenchmarkReport(spec_b, 2000.0, 1000.0, "B", 0)]
    assert select_best_site({"B": b, "A": a}) == "A"
    assert select_best_site({"B": a, "A": a}) == "A"  # then by id


@given(st.dictionaries(st.sampled_from("ABCDE"),
                       st.lists(st.integers(1, 10**6), min_size=1, max_size=4), min_size=1),
       st.integers(1, 1000), st.integers(1, 1000))
def test_best_site_invariant_under_rescaling(groups, num, den):
    scale = Fraction(num, den)
    spec = TransferSpec(Direction.Download, 1000)

    def reps(els, k):
        # scaling bandwidth by k at fixed size scales elapsed by 1/k
        return [BenchmarkReport.measured(spec, float(Fraction(e) / k), "p", 0) for e in els]

    base = {a: reps(e, 1) for a, e in groups.items()}
    scaled = {a: reps(e, scale) for a, e in groups.items()}
    means = {a: sum(r.bandwidth_bytes_per_s for r in v) / len(v) for a, v in base.items()}
    top = max(means.values())
    if sum(1 for m in means.values() if abs(m - top) <= 1e-9 * top) == 1:
        assert select_best_site(base) == select_best_site(scaled)


# config and restart


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ManagerConfig(poll_interval_ms=50)
    p = tmp_path / "m.conf"
    p.write_text("poll_interval_ms = 500\nscan_targets = 127.0.0.2:8000-8002\n")
    cfg = load_manager_config(p, listen_port=7100)
    assert cfg.poll_interval_ms == 500 and cfg.listen_port == 7100
    assert cfg.scan_targets == [("127.0.0.2", 8000), ("127.0.0.2", 8001), ("127.0.0.2", 8002)]


def test_restart_keeps_samples(tmp_path, agents, udp_port):
    agents(2, discovery_port=udp_port)
    with make_manager(tmp_path, discovery_port=udp_port, poll_interval_ms=200) as mgr:
        assert wait_until(lambda: mgr.stats()["samples"] >= 40)
    before = [r.sample for r in mgr.store.query()]
    again = make_manager(tmp_path)
    assert [r.sample for r in again.store.query()] == before
    again.store.close()


def test_stats_endpoint(tmp_path):
    with make_manager(tmp_path) as mgr:
        status, body = http_get("127.0.0.1", mgr.config.listen_port, "/stats")
    assert status == 200 and json.loads(body)["agents"] == 0
