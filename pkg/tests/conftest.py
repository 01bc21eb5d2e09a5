import socket
import time

import pytest

from clambs.agent import AgentConfig, MonitoringAgent
from clambs.backends import Synthetic, default_synthetic_script


def free_port(kind=socket.SOCK_STREAM, host="127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def wait_until(pred, timeout=5.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()


def synthetic_agent(port=0, host="127.0.0.1", script=None, processes=("Tomcat7w.exe",),
                    system_processes=(), discovery_port=0, seed=0, **kw) -> MonitoringAgent:
    backend = Synthetic(script if script is not None else default_synthetic_script(seed))
    cfg = AgentConfig(listen_port=port, listen_host=host,
                      monitored_processes=list(processes),
                      system_processes=list(system_processes), backend=backend,
                      discovery_port=discovery_port, **kw)
    return MonitoringAgent(cfg)


@pytest.fixture
def agent_factory():
    started = []

    def make(**kw):
        a = synthetic_agent(**kw).start()
        started.append(a)
        return a

    yield make
    for a in started:
        a.stop()


@pytest.fixture
def udp_port():
    return free_port(socket.SOCK_DGRAM)
