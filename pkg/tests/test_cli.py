import csv
import io
import json
import os
import signal
import subprocess
import sys


from clambs.bench import BenchAgentConfig, BenchmarkingAgent
from clambs.cli import parse_size, run
from clambs.harness import CountingHTTPServer
from clambs.transport import http_get

from conftest import free_port, wait_until


def table(text):
    return {line.split()[0]: line.split()[1:] for line in text.strip().splitlines()}


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flag_is_usage_error(capsys):
    assert run(["analyze", "--bogus"]) == 1
    assert run(["scenario", "V"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_analyze_flat_super_load(capsys):
    assert run(["analyze", "--model", "flat", "--N", "17", "--C", "1"]) == 0
    rows = table(capsys.readouterr().out)
    assert rows["super_manager_load"] == ["16"]


def test_analyze_both_columns(capsys):
    assert run(["analyze", "--N", "17", "--n", "4"]) == 0
    rows = table(capsys.readouterr().out)
    assert rows["metric"] == ["flat", "tree"]
    assert rows["super_manager_load"] == ["16", "4"]
    assert rows["levels"][1] == "3"
    assert rows["response_time_total"] == ["16", "28"]


def test_analyze_file(tmp_path, capsys):
    f = tmp_path / "model.json"
    f.write_text(json.dumps({
        "tree": {"N": 17, "n": 4},
        "topology": {"centers": [{"vm_count": 2}, {"vm_count": 3}, {"vm_count": 4}],
                     "manager_center": 2, "message_size": 100},
        "manager_message_sizes": [100, 100, 100],
    }))
    assert run(["analyze", "--file", str(f), "--csv"]) == 0
    rows = {r[0]: r[1:] for r in csv.reader(io.StringIO(capsys.readouterr().out))}
    assert rows["comm_overhead_bytes"] == ["600", "200"]
    assert rows["super_manager_load"] == ["16", "4"]


def test_analyze_sweep_csv(capsys):
    assert run(["analyze", "--N", "64", "--sweep", "n=2..16"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["n"]) for r in rows] == list(range(2, 17))
    assert rows[2]["search_time_avg"] == "3"  # log_4 64
    avg = [float(r["response_time_avg"]) for r in rows]
    assert avg == sorted(avg, reverse=True)


def test_analyze_needs_input(capsys):
    assert run(["analyze"]) == 1
    assert run(["analyze", "--sweep", "n=2..4"]) == 1
    assert run(["analyze", "--N", "5", "--n", "1"]) == 2


def test_parse_size():
    assert parse_size("64KB") == 65536 and parse_size("1MB") == 1 << 20
    assert parse_size("1048576") == 1 << 20 and parse_size("2GiB") == 2 << 30


def test_load_command(capsys):
    with CountingHTTPServer() as stub:
        assert run(["load", "--target", f"127.0.0.1:{stub.port}", "--threads", "4",
                    "--loops", "25"]) == 0
        assert stub.count == 100
    assert table(capsys.readouterr().out)["requests_ok"] == ["100"]


def test_bench_command(capsys):
    a = BenchmarkingAgent(BenchAgentConfig(listen_port=0, discovery_port=0)).start()
    try:
        dead = free_port()
        code = run(["bench", "--targets", f"127.0.0.1:{a.port},127.0.0.1:{dead}",
                    "--size", "64KB", "--repeats", "2", "--csv"])
    finally:
        a.stop()
    assert code == 0
    rows = {r["agent"]: r for r in csv.DictReader(io.StringIO(capsys.readouterr().out))}
    assert rows[f"127.0.0.1:{a.port}"]["note"] == "best"
    assert rows[f"127.0.0.1:{dead}"]["runs"] == "0"


def test_bench_all_down_is_runtime_failure(capsys):
    assert run(["bench", "--targets", f"127.0.0.1:{free_port()}", "--size", "1KB"]) == 2


def _env():
    env = dict(os.environ)
    src = os.path.join(os.path.dirname(__file__), "..", "src")
    env["PYTHONPATH"] = os.path.abspath(src) + os.pathsep + env.get("PYTHONPATH", "")
    return env


def test_daemons_run_and_stop_cleanly(tmp_path):
    agent_port, mgr_port = free_port(), free_port()
    conf = tmp_path / "agent.conf"
    conf.write_text(f"listen_port = {agent_port}\nbackend = synthetic:1\n"
                    "processes = Tomcat7w.exe\ndiscovery_port = 0\n")
    agent = subprocess.Popen([sys.executable, "-m", "clambs", "-q", "agent", "--config",
                              str(conf)], env=_env())
    mgr = None
    try:
        assert wait_until(lambda: _up(agent_port), timeout=15)
        mgr = subprocess.Popen([sys.executable, "-m", "clambs", "-q", "manager",
                                "--listen-port", str(mgr_port), "--store-path",
                                str(tmp_path / "s.log"), "--poll-interval-ms", "200",
                                "--discovery-port", str(free_port()),
                                "--discovery-window-ms", "200",
                                "--scan-targets", f"127.0.0.1:{agent_port}"], env=_env())
        assert wait_until(lambda: (_stats(mgr_port) or {}).get("samples", 0) > 20, timeout=15)
    finally:
        for p in (mgr, agent):
            if p is not None:
                p.send_signal(signal.SIGTERM)
        codes = [p.wait(timeout=20) for p in (mgr, agent) if p is not None]
    assert codes == [0, 0]


def test_bench_agent_daemon_runs():
    port = free_port()
    p = subprocess.Popen([sys.executable, "-m", "clambs", "-q", "bench-agent",
                          "--listen-port", str(port), "--discovery-port", "0"], env=_env())
    try:
        assert wait_until(lambda: _tcp_open(port), timeout=15)
    finally:
        p.send_signal(signal.SIGTERM)
    assert p.wait(timeout=20) == 0


def test_scenario_iv(capsys):
    assert run(["-q", "scenario", "IV", "--duration", "10", "--base-port", "8200"]) == 0
    rows = table(capsys.readouterr().out)
    assert rows["agents_polled"] == ["5"]
    assert rows["polls_failed"] == ["0"] and rows["crashed"] == ["false"]
    assert int(rows["samples"][0]) > 0 and float(rows["throughput_samples_per_s"][0]) > 0


def _tcp_open(port):
    import socket
    try:
        socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
        return True
    except OSError:
        return False


def _up(port):
    try:
        return http_get("127.0.0.1", port, "/descriptor", timeout=1)[0] == 200
    except OSError:
        return False


def _stats(port):
    try:
        status, body = http_get("127.0.0.1", port, "/stats", timeout=1)
    except OSError:
        return None
    return json.loads(body) if status == 200 else None


