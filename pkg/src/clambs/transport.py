"""Stream transport: framed request/response sessions plus a tiny HTTP GET mirror.

A listener accepts both framed clients and plain ``GET`` requests on the same
port; the first four bytes decide which (no valid frame header spells
``b"GET "``, it would declare a >1 GiB payload).
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Callable, Optional
from urllib.parse import parse_qs, urlsplit

from . import protocol
from .errors import ClambsError, MalformedFrame, PeerDisconnected, PortInUse, RemoteError

log = logging.getLogger(__name__)

HTTP_MAGIC = b"GET "
MAX_HTTP_HEAD = 8192


class Connection:
    """One side of a framed session over a connected socket."""

    def __init__(self, sock: socket.socket, prefix: bytes = b""):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self._prefix = prefix
        self._wlock = threading.Lock()

    @property
    def peer(self) -> str:
        try:
            host, port = self.sock.getpeername()[:2]
            return f"{host}:{port}"
        except OSError:
            return "?"

    def read(self, n: int) -> bytes:
        """Read up to ``n`` bytes, fewer only at EOF."""
        out = b""
        if self._prefix:
            out, self._prefix = self._prefix[:n], self._prefix[n:]
        while len(out) < n:
            chunk = self.rfile.read(n - len(out))
            if not chunk:
                break
            out += chunk
        return out

    def read_exact(self, n: int) -> bytes:
        data = self.read(n)
        if len(data) != n:
            raise PeerDisconnected(f"peer closed after {len(data)} of {n} bytes")
        return data

    def read_raw_frame(self, max_payload: int = protocol.MAX_PAYLOAD):
        """Return ``(tag, payload)`` or None on EOF at a frame boundary.

        Raises MalformedFrame when framing itself is broken (truncated or
        oversized); the stream cannot be resynchronised after that.
        """
        header = self.read(protocol.HEADER_SIZE)
        if not header:
            return None
        if len(header) < protocol.HEADER_SIZE:
            raise MalformedFrame("truncated frame header")
        length, tag = protocol.parse_header(header, max_payload)
        body = self.read(length)
        if len(body) < length:
            raise MalformedFrame("truncated frame payload")
        return tag, body

    def recv(self, max_payload: int = protocol.MAX_PAYLOAD):
        raw = self.read_raw_frame(max_payload)
        if raw is None:
            raise PeerDisconnected("connection closed")
        return protocol.decode_payload(*raw)

    def send(self, msg) -> None:
        self.send_bytes(protocol.encode_message(msg))

    def send_bytes(self, data: bytes) -> None:
        with self._wlock:
            self.sock.sendall(data)

    def close(self):
        for c in (self.rfile, self.sock):
            try:
                c.close()
            except OSError:
                pass


FrameHandler = Callable[[object, Connection], Optional[object]]
HttpHandler = Callable[[str, dict], tuple[int, str, bytes]]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: FramedServer = self.server.owner  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.settimeout(srv.idle_timeout)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        conn = Connection(sock)
        srv._track(conn, True)
        try:
            head = conn.read(len(HTTP_MAGIC))
            if not head:
                return
            if head == HTTP_MAGIC and srv.http_handler is not None:
                _serve_http(conn, head, srv.http_handler)
                return
            conn._prefix = head
            srv._serve_frames(conn)
        except (OSError, PeerDisconnected):
            pass
        finally:
            srv._track(conn, False)
            conn.close()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 128


class FramedServer:
    """Threaded listener dispatching decoded frames to ``frame_handler``.

    The handler returns a reply message (or None when it wrote to the
    connection itself). ClambsError subclasses raised by the handler are sent
    back as Error frames and the session continues.
    """

    def __init__(self, host: str, port: int, frame_handler: FrameHandler,
                 http_handler: Optional[HttpHandler] = None,
                 idle_timeout: float = 600.0, name: str = "server"):
        self.frame_handler = frame_handler
        self.http_handler = http_handler
        self.idle_timeout = idle_timeout
        self.name = name
        self._conns: set[Connection] = set()
        self._lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        try:
            self._server = _TCPServer((host, port), _Handler)
        except OSError as exc:
            raise PortInUse(f"cannot listen on {host}:{port}: {exc}") from None
        self._server.owner = self  # type: ignore[attr-defined]
        self.host, self.port = self._server.server_address[:2]

    def start(self) -> "FramedServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
            name=f"{self.name}-{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _track(self, conn, add):
        with self._lock:
            (self._conns.add if add else self._conns.discard)(conn)

    def _serve_frames(self, conn: Connection):
        while True:
            try:
                raw = conn.read_raw_frame()
            except MalformedFrame as exc:
                _try_send(conn, protocol.Error(MalformedFrame.code, str(exc)))
                return
            if raw is None:
                return
            try:
                msg = protocol.decode_payload(*raw)
                reply = self.frame_handler(msg, conn)
            except ClambsError as exc:
                reply = protocol.Error(exc.code, str(exc))
            except (OSError, PeerDisconnected):
                return
            except Exception as exc:  # a handler bug must not take the daemon down
                log.exception("%s: unhandled error for %s", self.name, conn.peer)
                reply = protocol.Error("InternalError", repr(exc))
            if reply is not None:
                conn.send(reply)


def _try_send(conn, msg):
    try:
        conn.send(msg)
    except OSError:
        pass


def _serve_http(conn: Connection, head: bytes, handler: HttpHandler):
    data = head
    while b"\r\n\r\n" not in data and b"\n\n" not in data:
        if len(data) > MAX_HTTP_HEAD:
            _http_reply(conn, 431, "text/plain", b"request header too large\n")
            return
        chunk = conn.read(1)
        if not chunk:
            return
        data += chunk
    request_line = data.split(b"\n", 1)[0].decode("latin-1").strip()
    parts = request_line.split()
    if len(parts) < 2:
        _http_reply(conn, 400, "text/plain", b"bad request line\n")
        return
    url = urlsplit(parts[1])
    query = parse_qs(url.query, keep_blank_values=False)
    try:
        status, ctype, body = handler(url.path, query)
    except ClambsError as exc:
        status, ctype, body = 400, "text/plain", f"{exc.code}: {exc}\n".encode()
    except Exception as exc:
        log.exception("http handler failed")
        status, ctype, body = 500, "text/plain", f"{exc!r}\n".encode()
    _http_reply(conn, status, ctype, body)


_REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found", 431: "Too Large",
            500: "Internal Server Error"}


def _http_reply(conn, status, ctype, body):
    head = (f"HTTP/1.0 {status} {_REASONS.get(status, 'Status')}\r\n"
            f"Content-Type: {ctype}\r\nContent-Length: {len(body)}\r\n"
            "Connection: close\r\n\r\n").encode("latin-1")
    _try_send_bytes(conn, head + body)


def _try_send_bytes(conn, data):
    try:
        conn.send_bytes(data)
    except OSError:
        pass


class FramedClient:
    """Persistent client session; reconnects lazily after a failure."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.conn: Optional[Connection] = None

    def connect(self) -> Connection:
        if self.conn is None:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.conn = Connection(sock)
        return self.conn

    def request(self, msg, raise_remote: bool = True):
        """Send one message and wait for one reply frame."""
        conn = self.connect()
        try:
            conn.send(msg)
            reply = conn.recv()
        except (OSError, ClambsError):
            self.close()
            raise
        if raise_remote and isinstance(reply, protocol.Error):
            raise RemoteError(reply.code, reply.message)
        return reply

    def close(self):
        if self.conn is not None:
            self.conn.close()
            self.conn = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def http_get(host: str, port: int, path: str, timeout: float = 5.0) -> tuple[int, bytes]:
    """Minimal GET used by tests and the CLI; avoids proxies and keep-alive."""
    import http.client

    c = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        c.request("GET", path)
        r = c.getresponse()
        return r.status, r.read()
    finally:
        c.close()
