import socket
import threading
import time

import pytest

from clambs.harness import CountingHTTPServer, ThrottledProxy, TokenBucket


class Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, s):
        self.now += s


def test_token_bucket_refill():
    clock = Clock()
    b = TokenBucket(rate=1, capacity=10, clock=clock, sleep=clock.sleep)
    assert b.available == 10
    assert b.try_consume(5)
    assert b.available == 5
    assert b.time_to_available(3) == 0
    clock.now += 2
    assert b.available == pytest.approx(7)
    b.consume(7)
    assert b.available == 0
    assert b.time_to_available(10) == 10.0
    clock.now += 100
    assert b.available == 10


def test_consume_blocks_for_the_right_time():
    clock = Clock()
    b = TokenBucket(rate=100, capacity=10, clock=clock, sleep=clock.sleep)
    b.consume(10)
    b.consume(1000)  # larger than capacity: drained in pieces
    assert clock.now == pytest.approx(10.0)
    assert not b.try_consume(1)


def test_bad_bucket():
    with pytest.raises(ValueError):
        TokenBucket(0, 1)


def _echo_server():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()

    def run():
        c, _ = srv.accept()
        with c:
            while True:
                d = c.recv(65536)
                if not d:
                    break
                c.sendall(d)

    threading.Thread(target=run, daemon=True).start()
    return srv


def test_proxy_shapes_throughput_and_preserves_bytes():
    srv = _echo_server()
    payload = bytes(range(256)) * 256  # 64 KiB
    with ThrottledProxy("127.0.0.1", srv.getsockname()[1], rate=64 * 1024,
                        upload_rate=10 * 1024 * 1024) as proxy:
        with socket.create_connection(("127.0.0.1", proxy.port)) as s:
            t0 = time.perf_counter()
            s.sendall(payload)
            s.shutdown(socket.SHUT_WR)
            got = b""
            while True:
                d = s.recv(65536)
                if not d:
                    break
                got += d
            elapsed = time.perf_counter() - t0
    srv.close()
    assert got == payload
    assert elapsed == pytest.approx(1.0, rel=0.15)


def test_counting_server_reset():
    import http.client

    with CountingHTTPServer() as stub:
        for _ in range(3):
            c = http.client.HTTPConnection("127.0.0.1", stub.port)
            c.request("GET", "/a")
            c.getresponse().read()
            c.close()
        assert stub.count == 3 and stub.by_path == {("GET", "/a"): 3}
        stub.reset()
        assert stub.count == 0
