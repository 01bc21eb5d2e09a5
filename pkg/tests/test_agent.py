import json
import socket
import struct
import threading
import time

import pytest

from clambs import protocol
from clambs.agent import AgentConfig, MonitoringAgent, load_agent_config
from clambs.backends import OsProbe
from clambs.config import ConfigError
from clambs.discovery import broadcast_probe
from clambs.errors import ProcessNotFound, RemoteError
from clambs.metrics import REGISTRY, MetricKind, Units
from clambs.transport import FramedClient, FramedServer, http_get

from conftest import free_port, synthetic_agent, wait_until

OID = REGISTRY.oid_of


def test_collect_scripted_memory_total():
    agent = synthetic_agent(script={MetricKind.VmMemTotalBytes: [649068544]})
    s = agent.collect(OID(MetricKind.VmMemTotalBytes))
    assert s.value == 649068544 and s.units is Units.Bytes


def test_collect_scripted_cpu():
    agent = synthetic_agent(script={MetricKind.VmCpuPercent: [6.25]})
    s = agent.collect(OID(MetricKind.VmCpuPercent))
    assert s.value == 6.25 and s.units is Units.Percent


def test_collect_ghost_process_on_osprobe():
    agent = MonitoringAgent(AgentConfig(backend=OsProbe(cpu_window_s=0.01)))
    with pytest.raises(ProcessNotFound):
        agent.collect(OID(MetricKind.ProcCpuPercent), "ghost-process")


def test_query_preserves_oid_order(agent_factory):
    agent = agent_factory()
    oids = (OID(MetricKind.NetPacketsOut), OID(MetricKind.VmCpuPercent),
            OID(MetricKind.VmMemTotalBytes))
    with FramedClient("127.0.0.1", agent.port) as c:
        reply = c.request(protocol.QoSRequest(oids))
    assert isinstance(reply, protocol.QoSResponse)
    assert [s.oid for s in reply.samples] == list(oids)
    assert all(s.agent_id == agent.agent_id for s in reply.samples)


def test_samples_equal_script_after_codec(agent_factory):
    script = [6.25, 7.125, 9.0, 0.1 + 0.2, 1e-300, 12345.678]
    agent = agent_factory(script={MetricKind.VmCpuPercent: script})
    got = []
    with FramedClient("127.0.0.1", agent.port) as c:
        for _ in script:
            r = c.request(protocol.QoSRequest((OID(MetricKind.VmCpuPercent),)))
            got.append(r.samples[0].value)
    assert got == script
    assert [struct.pack(">d", v) for v in got] == [struct.pack(">d", v) for v in script]


def test_process_metrics_per_process(agent_factory):
    agent = agent_factory(processes=("Tomcat7w.exe", "MySql.exe"))
    with FramedClient("127.0.0.1", agent.port) as c:
        r = c.request(protocol.QoSRequest((OID(MetricKind.ProcCpuPercent),
                                           OID(MetricKind.ProcMemBytes)), "MySql.exe"))
    assert [s.process for s in r.samples] == ["MySql.exe", "MySql.exe"]


def test_remote_errors_keep_session(agent_factory):
    agent = agent_factory(script={MetricKind.VmCpuPercent: [1.0]})
    with FramedClient("127.0.0.1", agent.port) as c:
        with pytest.raises(RemoteError) as ei:
            c.request(protocol.QoSRequest((OID(MetricKind.NetPacketsIn),)))
        assert ei.value.remote_code == "BackendUnavailable"
        r = c.request(protocol.QoSRequest((OID(MetricKind.VmCpuPercent),)))
        assert r.samples[0].value == 1.0


def test_malformed_frame_answered_with_error_then_next_request_works(agent_factory):
    agent = agent_factory()
    with socket.create_connection(("127.0.0.1", agent.port), timeout=5) as s:
        s.sendall(b"\x00\x00\x00\x02\x63{}")
        hdr = s.recv(5)
        length, tag = struct.unpack(">IB", hdr)
        assert tag == protocol.Error.TAG
        body = b""
        while len(body) < length:
            body += s.recv(length - len(body))
        assert json.loads(body)["code"] == "MalformedFrame"
    with FramedClient("127.0.0.1", agent.port) as c:
        assert isinstance(c.request(protocol.QoSRequest((OID(MetricKind.VmCpuPercent),))),
                          protocol.QoSResponse)


def test_probe_datagram_gets_announce(agent_factory, udp_port):
    agent = agent_factory(discovery_port=udp_port)
    found = broadcast_probe("255.255.255.255", udp_port, 500, "127.0.0.1")
    assert [d.agent_id for d in found] == [agent.agent_id]
    assert found[0] == agent.descriptor


def test_framed_probe_gets_announce(agent_factory):
    agent = agent_factory()
    with FramedClient("127.0.0.1", agent.port) as c:
        reply = c.request(protocol.Probe("127.0.0.1", 7000))
    assert reply == protocol.Announce(agent.descriptor)


def test_http_mirror(agent_factory):
    agent = agent_factory(script={MetricKind.VmCpuPercent: [6.25],
                                  MetricKind.ProcMemBytes: [42.0]})
    cpu, mem = OID(MetricKind.VmCpuPercent), OID(MetricKind.ProcMemBytes)
    status, body = http_get("127.0.0.1", agent.port, f"/qos?oid={cpu}")
    assert status == 200
    row = json.loads(body.splitlines()[0])
    assert row[:4] == [agent.agent_id, str(cpu), 6.25, "Percent"]
    status, body = http_get("127.0.0.1", agent.port, f"/qos?oid={mem}&process=Tomcat7w.exe")
    assert json.loads(body)[2] == 42.0 and json.loads(body)[5] == "Tomcat7w.exe"
    status, _ = http_get("127.0.0.1", agent.port, "/qos?oid=1..2")
    assert status == 400
    status, body = http_get("127.0.0.1", agent.port, "/descriptor")
    assert json.loads(body)["agent_id"] == agent.agent_id


def test_consecutive_ports_answer_independently():
    host = "127.0.0.9"
    agents = []
    try:
        for k, port in enumerate(range(8000, 8031)):
            agents.append(synthetic_agent(port=port, host=host,
                                          script={MetricKind.VmCpuPercent: [float(k)]}).start())
        for k, port in enumerate(range(8000, 8031)):
            with FramedClient(host, port) as c:
                r = c.request(protocol.QoSRequest((OID(MetricKind.VmCpuPercent),)))
            assert r.agent_id == f"{host}:{port}"
            assert r.samples[0].value == float(k)
    finally:
        for a in agents:
            a.stop()


class _FakeManager:
    def __init__(self, drop_first=0):
        self.reports = []
        self.drop_first = drop_first
        self.server = FramedServer("127.0.0.1", 0, self.handle, name="fake-manager").start()

    def handle(self, msg, conn):
        if self.drop_first > 0:
            self.drop_first -= 1
            conn.close()
            return None
        self.reports.append(msg)
        return protocol.PushReport(msg.report_id, msg.agent_id, ())


def test_push_mode_reports_once_per_interval(agent_factory):
    mgr = _FakeManager()
    try:
        agent = agent_factory(mode="push", manager_addr=("127.0.0.1", mgr.server.port),
                              push_interval_ms=1000)
        time.sleep(10.0)
        agent.stop()
        n = len(mgr.reports)
    finally:
        mgr.server.stop()
    assert 9 <= n <= 11
    assert all(isinstance(r, protocol.PushReport) for r in mgr.reports)
    assert len({r.report_id for r in mgr.reports}) == n


def test_push_retries_until_acknowledged(agent_factory):
    mgr = _FakeManager(drop_first=2)
    try:
        agent = agent_factory(mode="push", manager_addr=("127.0.0.1", mgr.server.port),
                              push_interval_ms=100)
        assert wait_until(lambda: len(mgr.reports) >= 5, timeout=5)
        agent.stop()
    finally:
        mgr.server.stop()
    seqs = [int(r.report_id.rsplit("/", 1)[1]) for r in mgr.reports]
    assert seqs[:5] == [1, 2, 3, 4, 5]


def test_push_threshold_suppresses_unchanged_values():
    agent = synthetic_agent(script={MetricKind.VmCpuPercent: [10.0, 10.05, 12.0]},
                            port=8999, processes=(), push_threshold=0.01, mode="push",
                            manager_addr=("127.0.0.1", 1))
    assert len(agent.build_report().samples) == 1
    assert agent.build_report() is None
    assert agent.build_report().samples[0].value == 12.0


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "agent.conf"
    p.write_text("# agent\nlisten_port = 8010\nmode = push\nmanager_addr = 10.0.0.1:7000\n"
                 "push_interval_ms = 500\nprocesses = Tomcat7w.exe, MySql.exe\n"
                 "backend = synthetic:2\n")
    cfg = load_agent_config(p, listen_port=9000)
    assert cfg.listen_port == 9000
    assert cfg.mode == "push" and cfg.manager_addr == ("10.0.0.1", 7000)
    assert cfg.push_interval_ms == 500
    assert cfg.monitored_processes == ["Tomcat7w.exe", "MySql.exe"]
    with pytest.raises(ConfigError):
        load_agent_config(p, push_interval_ms=50)
    with pytest.raises(ConfigError):
        AgentConfig(mode="push")


def test_many_concurrent_sessions(agent_factory):
    agent = agent_factory()
    errors = []

    def worker():
        try:
            with FramedClient("127.0.0.1", agent.port) as c:
                for _ in range(20):
                    c.request(protocol.QoSRequest((OID(MetricKind.VmCpuPercent),)))
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


def test_port_in_use():
    from clambs.errors import PortInUse

    port = free_port()
    a = synthetic_agent(port=port).start()
    try:
        with pytest.raises(PortInUse):
            synthetic_agent(port=port).start()
    finally:
        a.stop()


