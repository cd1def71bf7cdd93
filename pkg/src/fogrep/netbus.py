"""Localhost TCP backend with the same interface as :class:`SimBus`.

Every endpoint gets its own listening socket. Frames are a 4-byte
big-endian length followed by a canonical-encoded :class:`Envelope`.
Envelope kinds:

* ``req`` / ``resp``: one request and its reply on one connection
* ``pub``: one-way topic message from a publisher to a subscriber
* ``$sub`` / ``$unsub``: a subscriber asks a publisher endpoint to add or
  remove it for a topic (payload: encoded ``(subscriber, topic)``)

All handler and timer callbacks run under ``clock.lock``, so the daemon
code sees the same serialized execution as on the simulated bus.
"""

from __future__ import annotations

import itertools
import socket
import socketserver
import struct
import threading
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor

from .codec import decode, encode
from .errors import DecodeError, Timeout, UnknownEndpoint
from .transport import Envelope, Subscription

MAX_FRAME = 64 * 1024 * 1024


class RealTimer:
    __slots__ = ("cancelled", "timer")

    def __init__(self) -> None:
        self.cancelled = False
        self.timer: threading.Timer | None = None

    def cancel(self) -> None:
        self.cancelled = True
        if self.timer is not None:
            self.timer.cancel()


class RealClock:
    """Wall-clock milliseconds since the epoch plus thread timers."""

    def __init__(self) -> None:
        self.lock = threading.RLock()
        self.running = False

    def time(self) -> float:
        return time.time() * 1000.0

    def call_later(self, delay: float, fn: Callable, *args) -> RealTimer:
        handle = RealTimer()
        t = threading.Timer(max(0.0, delay) / 1000.0, self._fire, (handle, fn, args))
        t.daemon = True
        handle.timer = t
        t.start()
        return handle

    def call_at(self, when: float, fn: Callable, *args) -> RealTimer:
        return self.call_later(when - self.time(), fn, *args)

    def _fire(self, handle: RealTimer, fn: Callable, args: tuple) -> None:
        with self.lock:
            if not handle.cancelled:
                fn(*args)

    def run_while(self, predicate: Callable[[], bool], deadline: float) -> bool:
        while predicate() and self.time() < deadline:
            time.sleep(0.005)
        return not predicate()


def write_frame(sock: socket.socket, envelope: Envelope) -> None:
    body = encode(envelope)
    sock.sendall(struct.pack(">I", len(body)) + body)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Envelope | None:
    head = _read_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise DecodeError(f"frame of {n} bytes exceeds limit")
    body = _read_exact(sock, n)
    if body is None:
        return None
    return decode(body, Envelope)


class SocketBus:
    def __init__(self, clock: RealClock | None = None,
                 directory: dict[str, tuple[str, int]] | None = None,
                 host: str = "127.0.0.1") -> None:
        self.clock = clock or RealClock()
        self.host = host
        self.directory: dict[str, tuple[str, int]] = dict(directory or {})
        self.servers: dict[str, Callable] = {}
        self.listeners: dict[str, socketserver.ThreadingTCPServer] = {}
        self.subscriptions: dict[str, list[Subscription]] = {}
        self.subscribers: dict[tuple[str, str], set[str]] = {}
        self.down: set[str] = set()
        self._ids = itertools.count(1)
        self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="fogrep-bus")
        self._closed = False

    # -- endpoints
    def register(self, endpoint: str, port: int = 0) -> tuple[str, int]:
        if endpoint in self.listeners:
            return self.directory[endpoint]
        bus = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                bus._handle_connection(endpoint, self.request)

        server = socketserver.ThreadingTCPServer((self.host, port), Handler, bind_and_activate=False)
        server.daemon_threads = True
        server.allow_reuse_address = True
        server.server_bind()
        server.server_activate()
        threading.Thread(target=server.serve_forever, daemon=True,
                         name=f"fogrep-{endpoint}").start()
        self.listeners[endpoint] = server
        self.directory[endpoint] = server.server_address[:2]
        return self.directory[endpoint]

    def address(self, endpoint: str) -> tuple[str, int]:
        """Resolve an endpoint name, or a literal ``host:port``."""
        if endpoint in self.directory:
            return self.directory[endpoint]
        host, sep, port = endpoint.rpartition(":")
        if sep and host and port.isdigit():
            return host, int(port)
        raise UnknownEndpoint(endpoint)

    def serve(self, endpoint: str, handler: Callable) -> None:
        self.servers[endpoint] = handler

    def set_down(self, endpoint: str, down: bool = True) -> None:
        (self.down.add if down else self.down.discard)(endpoint)

    def close(self) -> None:
        self._closed = True
        for server in self.listeners.values():
            server.shutdown()
            server.server_close()
        self._pool.shutdown(wait=False, cancel_futures=True)

    def _submit(self, fn: Callable, *args) -> None:
        # timers may still fire while the bus is shutting down
        if self._closed:
            return
        try:
            self._pool.submit(fn, *args)
        except RuntimeError:
            pass

    # -- inbound
    def _handle_connection(self, endpoint: str, sock: socket.socket) -> None:
        lock = threading.Lock()

        def respond_on(cid: int) -> Callable[[bytes], None]:
            def respond(resp: bytes) -> None:
                with lock:
                    try:
                        write_frame(sock, Envelope("resp", endpoint, "", cid, resp))
                    except OSError:
                        pass
            return respond

        try:
            while True:
                env = read_frame(sock)
                if env is None or endpoint in self.down:
                    return
                with self.clock.lock:
                    self._dispatch(endpoint, env, respond_on(env.correlation_id))
        except (OSError, DecodeError):
            return

    def _dispatch(self, endpoint: str, env: Envelope, respond: Callable[[bytes], None]) -> None:
        if env.kind == "req":
            handler = self.servers.get(endpoint)
            if handler is not None:
                handler(env.payload, respond, env.sender)
        elif env.kind == "pub":
            for sub in list(self.subscriptions.get(env.topic, ())):
                if sub.active and sub.endpoint == endpoint and sub.source in (None, env.sender):
                    sub.handler(env.payload, env.sender)
        elif env.kind in ("$sub", "$unsub"):
            subscriber, topic = decode(env.payload, tuple)
            subs = self.subscribers.setdefault((endpoint, topic), set())
            (subs.add if env.kind == "$sub" else subs.discard)(subscriber)
            respond(b"")

    # -- outbound
    def _exchange(self, dst: str, env: Envelope, timeout_ms: float, expect_reply: bool) -> bytes | None:
        host, port = self.address(dst)
        try:
            with socket.create_connection((host, port), timeout=timeout_ms / 1000.0) as sock:
                sock.settimeout(timeout_ms / 1000.0)
                write_frame(sock, env)
                if not expect_reply:
                    return None
                reply = read_frame(sock)
        except (OSError, socket.timeout) as exc:
            raise Timeout(f"{env.kind} to {dst} failed: {exc}") from exc
        if reply is None:
            raise Timeout(f"{dst} closed the connection without replying")
        return reply.payload

    def request(self, src: str, dst: str, payload: bytes, timeout: float) -> bytes:
        env = Envelope("req", src, "", next(self._ids), payload)
        return self._exchange(dst, env, timeout, True)

    def request_async(self, src: str, dst: str, payload: bytes, timeout: float,
                      callback: Callable) -> None:
        if src in self.down:
            return

        def work() -> None:
            try:
                resp, err = self.request(src, dst, payload, timeout), None
            except Exception as exc:  # delivered to the callback like a timeout
                resp, err = None, exc
            with self.clock.lock:
                callback(resp, err)

        self._submit(work)

    # -- pub/sub
    def subscribe(self, endpoint: str, topic: str, handler: Callable,
                  source: str | None = None) -> Subscription:
        sub = Subscription(endpoint, topic, handler, source)
        self.subscriptions.setdefault(topic, []).append(sub)
        if source is not None:
            self._submit(self._control, sub, "$sub")
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        subs = self.subscriptions.get(sub.topic, [])
        if sub in subs:
            subs.remove(sub)
        if sub.source is not None:
            self._submit(self._control, sub, "$unsub")

    def _control(self, sub: Subscription, kind: str) -> None:
        delay = 0.1
        while not self._closed:
            if kind == "$sub" and not sub.active:
                return
            try:
                env = Envelope(kind, sub.endpoint, sub.topic, next(self._ids),
                               encode((sub.endpoint, sub.topic)))
                self._exchange(sub.source, env, 1000.0, True)
                return
            except (Timeout, UnknownEndpoint):
                if kind == "$unsub":
                    return
                time.sleep(delay)
                delay = min(delay * 2, 5.0)

    def publish(self, sender: str, topic: str, payload: bytes) -> None:
        if sender in self.down:
            return
        for dst in sorted(self.subscribers.get((sender, topic), ())):
            env = Envelope("pub", sender, topic, 0, payload)
            self._submit(self._send_quietly, dst, env)

    def _send_quietly(self, dst: str, env: Envelope) -> None:
        try:
            self._exchange(dst, env, 1000.0, False)
        except (Timeout, UnknownEndpoint):
            pass
