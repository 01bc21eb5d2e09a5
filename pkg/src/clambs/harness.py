"""Test-harness network pieces: a token-bucket throttled TCP proxy and a counting HTTP stub.

The throttle is the ground truth a bandwidth measurement is checked against.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

log = logging.getLogger(__name__)


# refill arithmetic can land a hair short of a whole piece; waiting for that
# remainder would spin, so it counts as available
_SLACK = 1e-9


class TokenBucket:
    """Classic token bucket; ``consume`` blocks until enough tokens accrue."""

    def __init__(self, rate: float, capacity: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0 or capacity <= 0:
            raise ValueError("rate and capacity must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity)
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(capacity)
        self._stamp = clock()
        self._lock = threading.Lock()

    def _refill(self):
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
        self._stamp = now

    @property
    def available(self) -> float:
        with self._lock:
            self._refill()
            return self._tokens

    def time_to_available(self, n: float) -> float:
        with self._lock:
            self._refill()
            return max(0.0, (n - self._tokens) / self.rate)

    def try_consume(self, n: float) -> bool:
        with self._lock:
            self._refill()
            if self._tokens >= n:
                self._tokens -= n
                return True
            return False

    def consume(self, n: float) -> None:
        """Take ``n`` tokens, in capacity-sized pieces if ``n`` exceeds the bucket."""
        while n > 0:
            piece = min(n, self.capacity)
            while True:
                with self._lock:
                    self._refill()
                    if self._tokens >= piece - _SLACK:
                        self._tokens = max(0.0, self._tokens - piece)
                        break
                    wait = (piece - self._tokens) / self.rate
                self._sleep(wait)
            n -= piece


class ThrottledProxy:
    """Forwards TCP connections to a target, shaping each direction with a token bucket.

    Buckets are per direction and shared by all connections, like one link.
    """

    def __init__(self, target_host: str, target_port: int, rate: float,
                 listen_host: str = "127.0.0.1", listen_port: int = 0,
                 burst: float | None = None, upload_rate: float | None = None):
        self.target = (target_host, target_port)
        cap = burst if burst is not None else max(256.0, rate / 32.0)
        self.down = TokenBucket(rate, cap)
        up = upload_rate if upload_rate is not None else rate
        self.up = TokenBucket(up, burst if burst is not None else max(256.0, up / 32.0))
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((listen_host, listen_port))
        self.sock.listen(64)
        self.host, self.port = self.sock.getsockname()[:2]
        self._stop = threading.Event()
        self._open: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True,
                                        name=f"proxy-{self.port}")

    def start(self) -> ThrottledProxy:
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        try:
            self.sock.close()
        except OSError:
            pass
        with self._lock:
            socks = list(self._open)
        for s in socks:
            _close(s)
        self._thread.join(timeout=2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                client, _ = self.sock.accept()
            except OSError:
                return
            try:
                upstream = socket.create_connection(self.target, timeout=5)
                upstream.settimeout(None)
            except OSError:
                _close(client)
                continue
            with self._lock:
                self._open.update((client, upstream))
            threading.Thread(target=self._pump, args=(client, upstream, self.up),
                             daemon=True).start()
            threading.Thread(target=self._pump, args=(upstream, client, self.down),
                             daemon=True).start()

    def _pump(self, src: socket.socket, dst: socket.socket, bucket: TokenBucket):
        chunk = int(max(1, min(4096, bucket.capacity)))
        try:
            while True:
                data = src.recv(chunk)
                if not data:
                    break
                bucket.consume(len(data))
                dst.sendall(data)
        except OSError:
            pass
        finally:
            try:
                dst.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            with self._lock:
                self._open.discard(src)


def _close(s):
    try:
        s.close()
    except OSError:
        pass


class _CountingHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.0"

    def _answer(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)
        self.server.bump(self.command, self.path)  # type: ignore[attr-defined]
        body = b"ok\n"
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    do_GET = _answer
    do_POST = _answer

    def log_message(self, fmt, *args):
        pass


class CountingHTTPServer(ThreadingHTTPServer):
    """HTTP stub that counts every request it answers."""

    daemon_threads = True
    request_queue_size = 256

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _CountingHandler)
        self.count = 0
        self.by_path: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def bump(self, method, path):
        with self._lock:
            self.count += 1
            self.by_path[(method, path)] = self.by_path.get((method, path), 0) + 1

    def reset(self):
        with self._lock:
            self.count = 0
            self.by_path.clear()

    def start(self) -> CountingHTTPServer:
        self._thread = threading.Thread(target=self.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
