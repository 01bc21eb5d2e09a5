"""Desk-scale multi-host scenarios: synthetic agents on loopback hosts, manager in a subprocess.

Each simulated host is a distinct 127.0.0.x address so the manager runs one
poller per host, as it would against separate VMs. The manager is a real
child process so its resident memory can be measured on its own.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import socket
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import psutil

from .agent import AgentConfig, MonitoringAgent
from .backends import Synthetic, default_synthetic_script
from .errors import ClambsError
from .transport import http_get

log = logging.getLogger(__name__)

SCENARIOS: dict[str, tuple[int, ...]] = {
    "I": (25, 30, 30),
    "II": (10, 20, 20),
    "III": (10, 10, 10),
    "IV": (1, 1, 3),
}
DEFAULT_HOSTS = ("127.0.0.2", "127.0.0.3", "127.0.0.4")
USER_PROCESSES = ("Tomcat7w.exe", "MySql.exe")
SYSTEM_PROCESSES = ("Lsass.exe",)


@dataclass
class ScenarioResult:
    scenario: str
    agents_started: int
    agents_registered: int
    duration_s: float
    polls_ok: int
    polls_failed: int
    missed_rounds: int
    unreachable: int
    samples: int
    store_bytes: int
    throughput_samples_per_s: float
    rss_mean_bytes: float
    rss_max_bytes: int
    cpu_mean_percent: float
    manager_exit_code: Optional[int]
    crashed: bool
    rss_series: list[int] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rss_series")
        return d


def loopback_hosts(count: int) -> list[str]:
    """Distinct 127.0.0.x hosts when the OS routes them, else plain 127.0.0.1."""
    hosts = list(DEFAULT_HOSTS[:count])
    try:
        for h in hosts:
            with socket.socket() as s:
                s.bind((h, 0))
        return hosts
    except OSError:
        return ["127.0.0.1"] * count


def free_port(kind=socket.SOCK_STREAM) -> int:
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_agents(counts, hosts, base_port: int, discovery_port: int) -> list[MonitoringAgent]:
    agents = []
    try:
        for h_idx, (host, count) in enumerate(zip(hosts, counts)):
            # a shared fallback host gets disjoint port ranges
            offset = sum(counts[:h_idx]) if hosts.count(host) > 1 else 0
            for k in range(count):
                seed = len(agents)
                cfg = AgentConfig(
                    listen_port=base_port + offset + k,
                    listen_host=host,
                    monitored_processes=list(USER_PROCESSES),
                    system_processes=list(SYSTEM_PROCESSES),
                    backend=Synthetic(default_synthetic_script(seed)),
                    discovery_port=discovery_port,
                )
                agents.append(MonitoringAgent(cfg).start())
    except Exception:
        stop_agents(agents)
        raise
    return agents


def stop_agents(agents):
    if agents:
        with ThreadPoolExecutor(max_workers=min(32, len(agents))) as pool:
            list(pool.map(lambda a: a.stop(), agents))


def _scan_targets(counts, hosts, base_port: int) -> str:
    parts = []
    for h_idx, (host, count) in enumerate(zip(hosts, counts)):
        offset = sum(counts[:h_idx]) if hosts.count(host) > 1 else 0
        lo = base_port + offset
        parts.append(f"{host}:{lo}-{lo + count - 1}")
    return ",".join(parts)


def _stats(port: int) -> Optional[dict]:
    try:
        status, body = http_get("127.0.0.1", port, "/stats", timeout=2.0)
    except OSError:
        return None
    return json.loads(body) if status == 200 else None


def run_scenario(name: str, duration_s: float, poll_interval_ms: int = 1000,
                 base_port: int = 8000, workdir=None, discovery_window_ms: int = 2000,
                 ready_timeout_s: float = 60.0) -> ScenarioResult:
    """Start the agents, launch a manager, let it poll for ``duration_s`` and report."""
    if name not in SCENARIOS:
        raise ClambsError(f"unknown scenario {name!r}; pick one of {', '.join(SCENARIOS)}")
    counts = SCENARIOS[name]
    hosts = loopback_hosts(len(counts))
    discovery_port = free_port(socket.SOCK_DGRAM)
    total = sum(counts)

    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix=f"clambs-scenario-{name}-")
        workdir = tmp.name
    workdir = Path(workdir)
    store_path = workdir / "samples.log"
    mgr_port = free_port()
    conf = workdir / "manager.conf"
    conf.write_text(
        f"listen_port = {mgr_port}\n"
        f"poll_interval_ms = {poll_interval_ms}\n"
        f"store_path = {store_path}\n"
        f"discovery_port = {discovery_port}\n"
        f"discovery_window_ms = {discovery_window_ms}\n"
        f"scan_targets = {_scan_targets(counts, hosts, base_port)}\n"
    )

    agents = start_agents(counts, hosts, base_port, discovery_port)
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    proc = None
    err_path = workdir / "manager.err"
    try:
        with open(err_path, "wb") as err:
            proc = subprocess.Popen(
                [sys.executable, "-m", "clambs", "--quiet", "manager", "--config", str(conf)],
                env=env, stdout=subprocess.DEVNULL, stderr=err)
        stats = _wait_ready(proc, mgr_port, total, ready_timeout_s)
        if stats is None:
            raise ClambsError(f"manager did not come up: {_stderr_tail(proc, err_path)}")
        baseline = stats
        ps = psutil.Process(proc.pid)
        ps.cpu_percent(None)
        rss, cpu = [], []
        t0 = time.monotonic()
        crashed = False
        while time.monotonic() - t0 < duration_s:
            time.sleep(min(1.0, max(0.0, duration_s - (time.monotonic() - t0))))
            if proc.poll() is not None:
                crashed = True
                break
            try:
                rss.append(ps.memory_info().rss)
                cpu.append(ps.cpu_percent(None))
            except psutil.Error:
                crashed = True
                break
        elapsed = time.monotonic() - t0
        final = _stats(mgr_port) or baseline
    finally:
        code = _terminate(proc)
        stop_agents(agents)
    # a clean SIGTERM shutdown exits 0; anything else counts as a crash
    crashed = crashed or code != 0
    samples = final["samples"] - baseline["samples"]
    result = ScenarioResult(
        scenario=name,
        agents_started=total,
        agents_registered=final["agents"],
        duration_s=elapsed,
        polls_ok=final["polls_ok"],
        polls_failed=final["polls_failed"],
        missed_rounds=final["missed_rounds"],
        unreachable=final["unreachable"],
        samples=final["samples"],
        store_bytes=store_path.stat().st_size if store_path.exists() else 0,
        throughput_samples_per_s=samples / elapsed if elapsed > 0 else 0.0,
        rss_mean_bytes=sum(rss) / len(rss) if rss else 0.0,
        rss_max_bytes=max(rss, default=0),
        cpu_mean_percent=sum(cpu) / len(cpu) if cpu else 0.0,
        manager_exit_code=code,
        crashed=crashed,
        rss_series=rss,
    )
    if tmp is not None:
        tmp.cleanup()
    return result


def _wait_ready(proc, port: int, expected: int, timeout_s: float) -> Optional[dict]:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            return None
        stats = _stats(port)
        if stats and stats["agents"] >= expected:
            return stats
        time.sleep(0.2)
    return None


def _terminate(proc) -> Optional[int]:
    if proc is None:
        return None
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout=20)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    return proc.returncode


def _stderr_tail(proc, err_path: Path) -> str:
    if proc.poll() is None:
        return "timed out waiting for discovery"
    err = err_path.read_text(errors="replace") if err_path.exists() else ""
    return err.strip().splitlines()[-1] if err.strip() else f"exit code {proc.returncode}"


def format_result(r: ScenarioResult) -> list[tuple[str, object]]:
    return [
        ("scenario", r.scenario),
        ("agents_polled", r.agents_registered),
        ("duration_s", round(r.duration_s, 2)),
        ("polls_ok", r.polls_ok),
        ("polls_failed", r.polls_failed),
        ("missed_rounds", r.missed_rounds),
        ("samples", r.samples),
        ("throughput_samples_per_s", round(r.throughput_samples_per_s, 2)),
        ("store_bytes", r.store_bytes),
        ("manager_rss_mb", round(r.rss_mean_bytes / 2**20, 2)),
        ("manager_cpu_percent", round(r.cpu_mean_percent, 2)),
        ("crashed", r.crashed),
    ]

