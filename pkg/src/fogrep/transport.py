"""Pub/sub and request/response between endpoints, plus fault injection.

Two backends share one interface:

* :class:`SimBus` on a virtual-time :class:`EventLoop`, used by tests and the
  simulation harness. Every drop/delay/reorder/partition decision is drawn
  from a seeded RNG in submission order, so a run is fully reproducible.
* :class:`fogrep.netbus.SocketBus` on localhost TCP with real time.

Request handlers receive ``(payload, respond, sender)`` and may call
``respond`` later, which lets a responder forward work asynchronously.
Subscription handlers receive ``(payload, sender)``.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from collections.abc import Callable
from dataclasses import dataclass, field

from .codec import encode, wire
from .errors import Timeout, UnknownEndpoint

Respond = Callable[[bytes], None]
RequestHandler = Callable[[bytes, Respond, str], None]
TopicHandler = Callable[[bytes, str], None]
ReplyCallback = Callable[["bytes | None", "Exception | None"], None]


# ---------------------------------------------------------------- clocks


class TimerHandle:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Virtual clock in milliseconds with a deterministic event queue.

    Ties on time are broken by scheduling order.
    """

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._queue: list[tuple[float, int, TimerHandle, Callable, tuple]] = []
        self._seq = itertools.count()
        self.running = False

    def time(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable, *args) -> TimerHandle:
        handle = TimerHandle()
        heapq.heappush(self._queue, (max(when, self._now), next(self._seq), handle, fn, args))
        return handle

    def call_later(self, delay: float, fn: Callable, *args) -> TimerHandle:
        return self.call_at(self._now + delay, fn, *args)

    def _step(self, limit: float) -> bool:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        if not self._queue or self._queue[0][0] > limit:
            return False
        when, _, _, fn, args = heapq.heappop(self._queue)
        self._now = when
        fn(*args)
        return True

    def run_until(self, t: float) -> None:
        self._guard()
        self.running = True
        try:
            while self._step(t):
                pass
            self._now = max(self._now, t)
        finally:
            self.running = False

    def run_for(self, ms: float) -> None:
        self.run_until(self._now + ms)

    def run_while(self, predicate: Callable[[], bool], deadline: float) -> bool:
        """Process events until ``predicate()`` is false or ``deadline``.

        Returns True if the predicate became false.
        """
        self._guard()
        self.running = True
        try:
            while predicate():
                if not self._step(deadline):
                    self._now = max(self._now, deadline)
                    return not predicate()
            return True
        finally:
            self.running = False

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e[2].cancelled)

    def _guard(self) -> None:
        if self.running:
            raise RuntimeError("event loop is already running (blocking call from a handler?)")


# ---------------------------------------------------------------- faults


@dataclass(frozen=True)
class Partition:
    side_a: frozenset[str]
    side_b: frozenset[str]
    start: float
    end: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "side_a", frozenset(self.side_a))
        object.__setattr__(self, "side_b", frozenset(self.side_b))
        if self.end < self.start:
            raise ValueError("partition ends before it starts")

    def cuts(self, src: str, dst: str, t: float) -> bool:
        if not self.start <= t < self.end:
            return False
        a_src, b_src = _in_group(src, self.side_a), _in_group(src, self.side_b)
        a_dst, b_dst = _in_group(dst, self.side_a), _in_group(dst, self.side_b)
        return (a_src and b_dst) or (b_src and a_dst)


def _in_group(endpoint: str, group: frozenset[str]) -> bool:
    # "edge" matches the endpoint "edge" and all machines "edge/<m>"
    return endpoint in group or endpoint.split("/", 1)[0] in group


@dataclass(frozen=True)
class FaultProfile:
    drop_probability: float = 0.0
    delay_ms: tuple[float, float] = (1.0, 1.0)
    reorder_probability: float = 0.0
    reorder_extra_ms: float = 30.0
    partitions: tuple[Partition, ...] = ()
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if not 0.0 <= self.reorder_probability <= 1.0:
            raise ValueError("reorder_probability must lie in [0, 1]")
        lo, hi = self.delay_ms
        if lo < 0 or hi < lo:
            raise ValueError("delay range must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "partitions", tuple(self.partitions))

    @classmethod
    def fixed_delay(cls, ms: float, **kw) -> FaultProfile:
        return cls(delay_ms=(ms, ms), **kw)

    def partitioned(self, src: str, dst: str, t: float) -> bool:
        return any(p.cuts(src, dst, t) for p in self.partitions)


@dataclass(frozen=True)
class Delivery:
    time: float
    kind: str  # pub | req | resp
    src: str
    dst: str
    topic: str
    payload: bytes


@dataclass(eq=False)
class Subscription:
    endpoint: str
    topic: str
    handler: TopicHandler
    source: str | None = None
    active: bool = field(default=True)


# ---------------------------------------------------------------- wire envelope


@wire
@dataclass(frozen=True)
class Envelope:
    """Frame body for the socket backend."""

    kind: str
    sender: str
    topic: str
    correlation_id: int
    payload: bytes


# ---------------------------------------------------------------- simulated bus


class SimBus:
    def __init__(self, loop: EventLoop, profile: FaultProfile | None = None) -> None:
        self.loop = loop
        self.profile = profile or FaultProfile()
        self.rng = random.Random(self.profile.rng_seed)
        self.faults_enabled = True
        self.endpoints: set[str] = set()
        self.down: set[str] = set()
        self.servers: dict[str, RequestHandler] = {}
        self.subscriptions: dict[str, list[Subscription]] = {}
        self.trace: list[Delivery] = []
        self.dropped = 0

    # -- endpoints
    def register(self, endpoint: str) -> None:
        self.endpoints.add(endpoint)

    def set_down(self, endpoint: str, down: bool = True) -> None:
        (self.down.add if down else self.down.discard)(endpoint)

    def set_profile(self, profile: FaultProfile) -> None:
        self.profile = profile
        self.rng = random.Random(profile.rng_seed)

    def _known(self, endpoint: str) -> None:
        if endpoint not in self.endpoints:
            raise UnknownEndpoint(endpoint)

    def serve(self, endpoint: str, handler: RequestHandler) -> None:
        self._known(endpoint)
        self.servers[endpoint] = handler

    # -- fault model
    def _arrival(self, src: str, dst: str) -> float | None:
        """Arrival time of a message sent now, or None if it is lost."""
        p = self.profile
        now = self.loop.time()
        lo, hi = p.delay_ms
        delay = lo if lo == hi else self.rng.uniform(lo, hi)
        if not self.faults_enabled:
            return now + delay
        lost = self.rng.random() < p.drop_probability
        if self.rng.random() < p.reorder_probability:
            delay += self.rng.uniform(0.0, p.reorder_extra_ms)
        arrival = now + delay
        if lost or p.partitioned(src, dst, now) or p.partitioned(src, dst, arrival):
            self.dropped += 1
            return None
        return arrival

    def _deliver(self, kind: str, src: str, dst: str, topic: str, payload: bytes,
                 fn: Callable, *args) -> None:
        if dst in self.down:
            self.dropped += 1
            return
        self.trace.append(Delivery(self.loop.time(), kind, src, dst, topic, payload))
        fn(*args)

    # -- pub/sub
    def subscribe(self, endpoint: str, topic: str, handler: TopicHandler,
                  source: str | None = None) -> Subscription:
        self._known(endpoint)
        sub = Subscription(endpoint, topic, handler, source)
        self.subscriptions.setdefault(topic, []).append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        subs = self.subscriptions.get(sub.topic, [])
        if sub in subs:
            subs.remove(sub)

    def publish(self, sender: str, topic: str, payload: bytes) -> None:
        """Fire-and-forget; never raises for delivery problems."""
        if sender in self.down:
            return
        for sub in list(self.subscriptions.get(topic, ())):
            if sub.source is not None and sub.source != sender:
                continue
            if sub.endpoint == sender:
                continue
            at = self._arrival(sender, sub.endpoint)
            if at is not None:
                self.loop.call_at(at, self._on_pub, sub, sender, topic, payload)

    def _on_pub(self, sub: Subscription, sender: str, topic: str, payload: bytes) -> None:
        if sub.active:
            self._deliver("pub", sender, sub.endpoint, topic, payload, sub.handler, payload, sender)

    # -- request/response
    def request_async(self, src: str, dst: str, payload: bytes, timeout: float,
                      callback: ReplyCallback) -> None:
        self._known(src)
        self._known(dst)
        state = {"done": False}

        def finish(resp: bytes | None, err: Exception | None) -> None:
            if not state["done"]:
                state["done"] = True
                timer.cancel()
                callback(resp, err)

        timer = self.loop.call_later(
            timeout, finish, None, Timeout(f"request {src} -> {dst} timed out")
        )

        def on_response(resp: bytes) -> None:
            if state["done"]:
                return
            self._deliver("resp", dst, src, "", resp, finish, resp, None)

        def respond(resp: bytes) -> None:
            at = self._arrival(dst, src)
            if at is not None:
                self.loop.call_at(at, on_response, resp)

        def on_request() -> None:
            handler = self.servers.get(dst)
            if handler is None or state["done"]:
                return
            self._deliver("req", src, dst, "", payload, handler, payload, respond, src)

        if src in self.down:
            return
        at = self._arrival(src, dst)
        if at is not None:
            self.loop.call_at(at, on_request)

    def request(self, src: str, dst: str, payload: bytes, timeout: float) -> bytes:
        """Blocking round trip; advances the virtual clock until a reply or
        the timeout. Must not be called from inside a handler."""
        box: dict[str, object] = {}

        def cb(resp: bytes | None, err: Exception | None) -> None:
            box["resp"], box["err"] = resp, err

        self.request_async(src, dst, payload, timeout, cb)
        self.loop.run_while(lambda: "resp" not in box, self.loop.time() + timeout + 1)
        if box.get("err") is not None:
            raise box["err"]  # type: ignore[misc]
        if "resp" not in box:
            raise Timeout(f"request {src} -> {dst} timed out")
        return box["resp"]  # type: ignore[return-value]

    # -- inspection
    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for d in self.trace:
            h.update(encode((d.time, d.kind, d.src, d.dst, d.topic, d.payload)))
        return h.hexdigest()
