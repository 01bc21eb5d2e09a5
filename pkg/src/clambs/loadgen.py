"""HTTP load generator: a thread group where each thread runs a fixed loop of requests."""
from __future__ import annotations

import http.client
import threading
import time
from typing import Optional

from .workload import LoadReport, WorkloadSpec


class _Tally:
    def __init__(self):
        self.lock = threading.Lock()
        self.sent = self.ok = self.failed = 0

    def add(self, ok: bool):
        with self.lock:
            self.sent += 1
            if ok:
                self.ok += 1
            else:
                self.failed += 1


def _one_request(spec: WorkloadSpec, timeout: float) -> bool:
    conn = http.client.HTTPConnection(spec.target_host, spec.target_port, timeout=timeout)
    try:
        body = b"" if spec.method == "POST" else None
        conn.request(spec.method, spec.path, body=body,
                     headers={"Connection": "close", "User-Agent": "clambs-loadgen"})
        resp = conn.getresponse()
        resp.read()
        return resp.status < 400
    except (OSError, http.client.HTTPException):
        return False
    finally:
        conn.close()


def run_load(spec: WorkloadSpec, stop_event: Optional[threading.Event] = None,
             timeout: float = 5.0) -> LoadReport:
    """Run ``threads`` workers, each issuing ``loops`` sequential requests.

    Failures (refused connections, timeouts, 4xx/5xx) are counted, never raised.
    Setting ``stop_event`` ends the run early; unsent requests are not counted.
    """
    stop_event = stop_event or threading.Event()
    tally = _Tally()
    think = spec.think_time_ms / 1000.0

    def worker():
        for i in range(spec.loops):
            if stop_event.is_set():
                return
            tally.add(_one_request(spec, timeout))
            if think and i + 1 < spec.loops and stop_event.wait(think):
                return

    t0 = time.perf_counter()
    workers = [threading.Thread(target=worker, daemon=True, name=f"load-{k}")
               for k in range(spec.threads)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return LoadReport(tally.sent, tally.ok, tally.failed, elapsed_ms)
