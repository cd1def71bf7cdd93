"""Per-machine runtime of a node.

Every machine of a node runs one :class:`Machine`. Machines never talk to
each other directly; all shared state (records, counters, sender buffers,
receiver cursors, cached configuration, trigger logs, heartbeats) lives in
the node's storage connector.

Replication protocol, per ``(sender node, keygroup)`` stream:

* the sender stamps each update with the next counter, remembers
  ``counter -> record key`` in a bounded ring (the sender buffer) and
  publishes the sealed record fire-and-forget on the keygroup topic;
* the receiving node's responsible machine tracks the highest counter seen
  and the set of missing counters; a missing counter is requested directly
  from a machine of the sender after a short grace period (so reordered
  messages can still fill the gap), with exponential backoff on timeouts;
* the sender answers with the *current* record for every buffered counter
  and a loss marker for counters that left the buffer, or whose record is
  gone (expired) at the sender;
* senders periodically publish a counter beacon so losses at the end of a
  stream are detected as well.
"""

from __future__ import annotations

import hashlib
import logging
import time
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Any

from .codec import decode, encode, wire
from .crypto import ReplayGuard, SealedRecord, open_record, seal_record, verify
from .errors import (
    AuthenticationFailed,
    DecodeError,
    FogError,
    Forbidden,
    NamingUnreachable,
    NoLiveMachines,
    NotReplicaNode,
    NotTriggerNode,
    ReplayDetected,
    SignatureInvalid,
    StorageFailure,
    Unauthenticated,
    UnknownKeygroup,
    UnknownSecretVersion,
)
from .identity import Identity
from .model import (
    ClientDescriptor,
    CounterBeacon,
    DataRecord,
    EntityId,
    KeygroupMetadata,
    KeygroupName,
    SecretVersion,
    UpdateMessage,
    as_keygroup,
    tombstone,
)
from .naming import NamingClient, Response, SyncView
from .storage import StorageConnector

log = logging.getLogger(__name__)

DAY_MS = 24 * 3600 * 1000


@dataclass
class DaemonConfig:
    buffer_capacity: int = 64
    heartbeat_period_ms: float = 200.0
    membership_timeout_ms: float = 1000.0
    config_refresh_ms: float = 5000.0
    beacon_period_ms: float = 500.0
    gap_grace_ms: float = 50.0
    recovery_base_ms: float = 100.0
    recovery_cap_ms: float = 5000.0
    request_timeout_ms: float = 100.0
    naming_timeout_ms: float = 500.0
    secret_grace_ms: float = 60_000.0
    sweep_floor_ms: float = 50.0
    sweep_max_ms: float = 1000.0
    trigger_poll_ms: float = 10.0
    compaction_factor: float = 10.0
    compaction_default_ms: float = float(DAY_MS)
    # which remaining replica a newly joined replica copies existing data from
    sync_source: str = "smallest"


# ---------------------------------------------------------------- wire types


@wire
@dataclass(frozen=True)
class Cursor:
    """Receiver state for one (sender node, keygroup) stream.

    Counters in ``(baseline, highest_seen]`` are partitioned into applied,
    ``pending`` and ``lost``; applied is everything not in the other two.
    """

    baseline: int = 0
    highest_applied: int = 0
    highest_seen: int = 0
    pending: frozenset[int] = frozenset()
    lost: frozenset[int] = frozenset()

    @property
    def applied(self) -> int:
        return self.highest_seen - self.baseline - len(self.pending) - len(self.lost)


@wire
@dataclass(frozen=True)
class Ack:
    timestamp: int
    counter: int


@wire
@dataclass(frozen=True)
class RecoveryRequest:
    keygroup: KeygroupName
    requester: str
    counters: tuple[int, ...]


@wire
@dataclass(frozen=True)
class RecoveredItem:
    counters: tuple[int, ...]
    sealed: SealedRecord


@wire
@dataclass(frozen=True)
class RecoveryResponse:
    items: tuple[RecoveredItem, ...]
    lost: tuple[int, ...]


@wire
@dataclass(frozen=True)
class SyncRequest:
    keygroup: KeygroupName
    requester: str
    want_records: bool


@wire
@dataclass(frozen=True)
class SyncResponse:
    latest_counter: int
    records: tuple[SealedRecord, ...]


@wire
@dataclass(frozen=True)
class ClientRequest:
    op: str
    args: tuple
    client: str
    nonce: bytes
    counter: int


@wire
@dataclass(frozen=True)
class SignedRequest:
    body: bytes
    signature: bytes


@wire
@dataclass(frozen=True)
class TriggerBatch:
    offset: int
    records: tuple[SealedRecord, ...]


# ---------------------------------------------------------------- helpers


def _score(machine: str, remote: str) -> bytes:
    return hashlib.sha256(f"{machine}\x00{remote}".encode()).digest()


def assign_responsibility(live: list[str], remote_nodes) -> dict[str, str]:
    """Rendezvous assignment of remote nodes to live local machines."""
    if not live:
        raise NoLiveMachines("no live machine to take responsibility")
    return {r: max(live, key=lambda m: (_score(m, r), m)) for r in sorted(remote_nodes)}


def rebalance(live: list[str], remote_nodes) -> dict[str, str]:
    return assign_responsibility(live, remote_nodes)


def sweep_period(ttl_ms: int | None, floor: float = 50.0, cap: float = 1000.0) -> float:
    base = cap if ttl_ms is None else min(ttl_ms, cap)
    return max(floor, base / 2)


class TriggerConsumer:
    """One registration on a node's trigger stream for a keygroup.

    Records are delivered exactly once per registration in local arrival
    order, either through ``poll()`` or pushed to ``callback``.
    """

    def __init__(self, machine: Machine, kg: KeygroupName, offset: int,
                 callback: Callable[[DataRecord], None] | None) -> None:
        self.machine = machine
        self.kg = kg
        self.offset = offset
        self.callback = callback
        self.active = True

    def poll(self) -> list[DataRecord]:
        stream = self.machine.storage.meta_get(("trigger", str(self.kg)), ())
        new = list(stream[self.offset:])
        self.offset = len(stream)
        return new

    def dispatch(self) -> int:
        if not self.active or self.callback is None:
            return 0
        new = self.poll()
        for r in new:
            self.callback(r)
        return len(new)

    def close(self) -> None:
        self.active = False


@dataclass
class _Recovery:
    timer: Any = None
    due: float = float("inf")
    attempt: int = 0
    inflight: bool = False


@dataclass
class _JoinState:
    remaining: set[str] = field(default_factory=set)
    attempt: int = 0


# ---------------------------------------------------------------- machine


class Machine:
    def __init__(
        self,
        name: str,
        node: str,
        identity: Identity,
        storage: StorageConnector,
        bus,
        clock,
        naming_public: bytes,
        naming_endpoint: str = "naming",
        config: DaemonConfig | None = None,
    ) -> None:
        self.name = name
        self.node = node
        self.identity = identity
        self.storage = storage
        self.bus = bus
        self.clock = clock
        self.naming_endpoint = naming_endpoint
        self.naming = NamingClient(identity, naming_public)
        self.config = config or DaemonConfig()
        self.endpoint = f"{node}/{name}"
        self.entropy = identity.entropy
        self.running = False
        self.stats: Counter[str] = Counter()
        self.apply_log: list[tuple[str, str, int]] = []
        self.on_apply: list[Callable[[KeygroupName, DataRecord, float], None]] = []
        self.on_commit: list[Callable[[KeygroupName, DataRecord, float], None]] = []
        self.last_storage_ns = 0
        self._timers: list[Any] = []
        self._subs: dict[tuple[str, str], Any] = {}
        self._responsible: set[str] = set()
        self._recovery: dict[tuple[str, str], _Recovery] = {}
        self._joins: dict[str, _JoinState] = {}
        self._refreshing = False
        self._refresh_waiters: list[Callable[[], None]] = []
        self._cfg_gen_seen = -1
        self._consumers: list[TriggerConsumer] = []
        self._client_guard = ReplayGuard()

    # ------------------------------------------------------------ lifecycle
    def start(self) -> None:
        self.running = True
        self.bus.register(self.endpoint)
        self.bus.serve(self.endpoint, self._serve)
        self._heartbeat()
        self._every(self.config.heartbeat_period_ms, self._heartbeat)
        self._every(self.config.beacon_period_ms, self._beacon)
        self._every(self.config.config_refresh_ms, self._periodic_refresh)
        self._every(self.config.trigger_poll_ms, self._dispatch_triggers)
        self._schedule_sweep()
        self.config_refresh()

    def stop(self) -> None:
        """Crash-stop: timers die, subscriptions are left dangling."""
        self.running = False
        for t in self._timers:
            t.cancel()
        self._timers.clear()
        for rec in self._recovery.values():
            if rec.timer is not None:
                rec.timer.cancel()

    def _every(self, period: float, fn: Callable[[], None]) -> None:
        def tick() -> None:
            if not self.running:
                return
            fn()
            self._timers.append(self.clock.call_later(period, tick))
        self._timers.append(self.clock.call_later(period, tick))

    def _later(self, delay: float, fn: Callable, *args) -> Any:
        def run() -> None:
            if self.running:
                fn(*args)
        handle = self.clock.call_later(delay, run)
        self._timers.append(handle)
        if len(self._timers) > 256:
            self._timers = [t for t in self._timers if not getattr(t, "cancelled", False)][-128:]
        return handle

    def now(self) -> float:
        return self.clock.time()

    # ------------------------------------------------------------ shared config
    def cached(self, kg: KeygroupName | str) -> KeygroupMetadata | None:
        return self.storage.meta_get(("cfg", str(kg)))

    def cached_keygroups(self) -> list[KeygroupMetadata]:
        return [self.storage.meta_get(k) for k in self.storage.meta_keys(("cfg",))]

    def keyring(self, kg: KeygroupName | str) -> dict[int, SecretVersion]:
        now = self.now()
        ring = self.storage.meta_get(("secrets", str(kg)), ())
        return {s.version: s for s, expires in ring if expires is None or expires > now}

    def directory(self) -> dict[str, tuple]:
        return self.storage.meta_get(("dir",), {})

    def live_machines(self) -> list[str]:
        return self.storage.live_machines(self.now(), self.config.membership_timeout_ms)

    def _is_leader(self) -> bool:
        live = self.live_machines()
        return bool(live) and live[0] == self.name

    # ------------------------------------------------------------ client API
    def _require(self, kg: KeygroupName, client: str, write: bool) -> KeygroupMetadata:
        meta = self.cached(kg)
        if write:
            if meta is None or not meta.is_replica(self.node):
                raise NotReplicaNode(f"{self.node} is not a replica node of {kg}")
        elif meta is None:
            raise UnknownKeygroup(f"{self.node} holds no keygroup {kg}")
        if client not in meta.authorized_clients:
            raise Forbidden(f"client {client} is not authorized for {kg}")
        return meta

    def handle_put(self, client: str, kg: KeygroupName | str, key: str,
                   fields: dict[str, bytes]) -> Ack:
        kg = as_keygroup(kg)
        meta = self._require(kg, client, write=True)
        return self._commit(kg, meta, key, lambda ts: DataRecord(kg, key, fields, ts, self.node))

    def handle_delete(self, client: str, kg: KeygroupName | str, key: str) -> Ack:
        kg = as_keygroup(kg)
        meta = self._require(kg, client, write=True)
        return self._commit(kg, meta, key, lambda ts: tombstone(kg, key, ts, self.node))

    def handle_get(self, client: str, kg: KeygroupName | str, key: str) -> DataRecord | None:
        kg = as_keygroup(kg)
        self._require(kg, client, write=False)
        t0 = time.perf_counter_ns()
        record = self.storage.get(kg, key, self.now())
        self.last_storage_ns = time.perf_counter_ns() - t0
        if record is None or record.deleted:
            return None
        return record

    def _commit(self, kg: KeygroupName, meta: KeygroupMetadata, key: str,
                make: Callable[[int], DataRecord]) -> Ack:
        now = self.now()
        try:
            with self.storage.lock:
                prev = self.storage.get_stored(kg, key)
                ts = int(now)
                if prev is not None:
                    ts = max(ts, prev.record.timestamp + 1)
                record = make(ts)
                t0 = time.perf_counter_ns()
                self.storage.merge(kg, record, now)
                self.last_storage_ns = time.perf_counter_ns() - t0
                counter = self._publish(kg, meta, record)
        except FogError:
            raise
        except Exception as exc:  # connector bugs surface as a domain error
            raise StorageFailure(str(exc)) from exc
        if meta.is_trigger(self.node):
            self._trigger_append(kg, record)
        for cb in self.on_commit:
            cb(kg, record, now)
        return Ack(record.timestamp, counter)

    def _publish(self, kg: KeygroupName, meta: KeygroupMetadata, record: DataRecord) -> int:
        name = str(kg)
        counter = self.storage.meta_update(("counter", name), lambda c: (c or 0) + 1)
        cap = self.config.buffer_capacity
        self.storage.meta_update(
            ("buffer", name), lambda b: (tuple(b or ()) + ((counter, record.key),))[-cap:]
        )
        sealed = seal_record(record, meta.secret, self.entropy)
        msg = UpdateMessage(self.node, kg, counter, encode(sealed), meta.secret.version)
        self.bus.publish(self.endpoint, name, encode(msg))
        self.stats["published"] += 1
        return counter

    # ------------------------------------------------------------ triggers
    def trigger_consume(self, kg: KeygroupName | str,
                        consumer: Callable[[DataRecord], None] | None = None) -> TriggerConsumer:
        kg = as_keygroup(kg)
        meta = self.cached(kg)
        if meta is None or not meta.is_trigger(self.node):
            raise NotTriggerNode(f"{self.node} is not a trigger node of {kg}")
        offset = len(self.storage.meta_get(("trigger", str(kg)), ()))
        c = TriggerConsumer(self, kg, offset, consumer)
        self._consumers.append(c)
        return c

    def _trigger_append(self, kg: KeygroupName, record: DataRecord) -> None:
        self.storage.meta_update(("trigger", str(kg)), lambda s: tuple(s or ()) + (record,))
        self._dispatch_triggers()

    def _dispatch_triggers(self) -> None:
        self._consumers = [c for c in self._consumers if c.active]
        for c in self._consumers:
            c.dispatch()

    # ------------------------------------------------------------ receiving
    def _on_message(self, payload: bytes, sender: str) -> None:
        if not self.running:
            return
        try:
            msg = decode(payload)
        except DecodeError:
            self.stats["garbage"] += 1
            return
        if isinstance(msg, CounterBeacon):
            if msg.sender_node in self._responsible:
                self._receive(msg.sender_node, msg.keygroup, msg.latest_counter, None, beacon=True)
            return
        if isinstance(msg, UpdateMessage):
            self.on_update(msg)

    def on_update(self, msg: UpdateMessage, retried: bool = False) -> None:
        if msg.sender_node not in self._responsible:
            return
        kg = msg.keygroup
        meta = self.cached(kg)
        if meta is None or msg.sender_node not in meta.replica_nodes:
            return
        record = None
        try:
            record = open_record(decode(msg.payload, SealedRecord), self.keyring(kg))
        except UnknownSecretVersion:
            self.stats["unknown_secret"] += 1
            if not retried:
                self.config_refresh(then=lambda: self.on_update(msg, retried=True))
                return
        except (AuthenticationFailed, DecodeError):
            self.stats["decrypt_failures"] += 1
            log.warning("%s: discarding unauthenticated update from %s", self.endpoint, msg.sender_node)
        if record is not None and record.ident != (kg, record.key):
            record = None
        self._receive(msg.sender_node, kg, msg.counter, record)

    def _cursor(self, sender: str, kg: KeygroupName) -> Cursor | None:
        return self.storage.meta_get(("cursor", sender, str(kg)))

    def _receive(self, sender: str, kg: KeygroupName, counter: int,
                 record: DataRecord | None, beacon: bool = False) -> None:
        key = ("cursor", sender, str(kg))
        now = self.now()
        with self.storage.lock:
            cur = self.storage.meta_get(key)
            if cur is None:
                # stream not yet baselined by a join sync; keep the data anyway
                if record is not None:
                    self._apply(kg, record, now)
                return
            if counter <= cur.baseline:
                return
            if counter > cur.highest_seen:
                gap = frozenset(range(cur.highest_seen + 1, counter + 1))
                cur = replace(cur, pending=cur.pending | gap, highest_seen=counter)
            if record is not None and (counter in cur.pending or counter in cur.lost):
                self._apply(kg, record, now)
                self.apply_log.append((sender, str(kg), counter))
                cur = replace(
                    cur,
                    pending=cur.pending - {counter},
                    lost=cur.lost - {counter},
                    highest_applied=max(cur.highest_applied, counter),
                )
                self.stats["applied"] += 1
            self.storage.meta_put(key, cur)
        if cur.pending:
            self._schedule_recovery(sender, kg, self.config.gap_grace_ms)

    def _apply(self, kg: KeygroupName, record: DataRecord, now: float) -> None:
        if not self.storage.has_keygroup(kg):
            return
        _, changed = self.storage.merge(kg, record, now)
        meta = self.cached(kg)
        if meta is not None and meta.is_trigger(self.node):
            self._trigger_append(kg, record)
        if changed:
            for cb in self.on_apply:
                cb(kg, record, now)

    # ------------------------------------------------------------ gap recovery
    def _schedule_recovery(self, sender: str, kg: KeygroupName, delay: float) -> None:
        st = self._recovery.setdefault((sender, str(kg)), _Recovery())
        due = self.now() + delay
        if st.inflight or st.due <= due:
            return
        if st.timer is not None:
            st.timer.cancel()
        st.due = due
        st.timer = self._later(delay, self.recover_gaps, sender, kg)

    def recover_gaps(self, sender: str, kg: KeygroupName) -> None:
        st = self._recovery.setdefault((sender, str(kg)), _Recovery())
        st.timer, st.due = None, float("inf")
        if st.inflight or sender not in self._responsible:
            return
        cur = self._cursor(sender, kg)
        if cur is None or not cur.pending:
            st.attempt = 0
            return
        machines = self.directory().get(sender, ())
        if not machines:
            self._retry_recovery(sender, kg, st)
            return
        _, address = machines[st.attempt % len(machines)]
        counters = tuple(sorted(cur.pending))
        req = RecoveryRequest(kg, self.node, counters)
        st.inflight = True
        self.stats["recovery_requests"] += 1

        def done(resp: bytes | None, err: Exception | None) -> None:
            st.inflight = False
            if not self.running:
                return
            if err is not None:
                self.stats["recovery_timeouts"] += 1
                self._retry_recovery(sender, kg, st)
                return
            try:
                self._absorb_recovery(sender, kg, decode(resp, Response).unwrap())
            except FogError as exc:
                log.info("%s: recovery from %s failed: %s", self.endpoint, sender, exc)
                self._retry_recovery(sender, kg, st)
                return
            st.attempt = 0
            cur2 = self._cursor(sender, kg)
            if cur2 is not None and cur2.pending:
                self._schedule_recovery(sender, kg, self.config.gap_grace_ms)

        self.bus.request_async(self.endpoint, address, encode(req),
                               self.config.request_timeout_ms, done)

    def _retry_recovery(self, sender: str, kg: KeygroupName, st: _Recovery) -> None:
        st.attempt += 1
        delay = min(self.config.recovery_base_ms * 2 ** (st.attempt - 1), self.config.recovery_cap_ms)
        self._schedule_recovery(sender, kg, delay)

    def _absorb_recovery(self, sender: str, kg: KeygroupName, resp: RecoveryResponse) -> None:
        key = ("cursor", sender, str(kg))
        now = self.now()
        ring = self.keyring(kg)
        refresh = False
        with self.storage.lock:
            cur = self.storage.meta_get(key)
            if cur is None:
                return
            pending, lost = set(cur.pending), set(cur.lost)
            for item in resp.items:
                try:
                    record = open_record(item.sealed, ring)
                except UnknownSecretVersion:
                    refresh = True
                    continue
                except AuthenticationFailed:
                    self.stats["decrypt_failures"] += 1
                    continue
                if record.keygroup != kg:
                    continue
                self._apply(kg, record, now)
                for c in item.counters:
                    if c in pending:
                        pending.discard(c)
                        self.apply_log.append((sender, str(kg), c))
                        self.stats["recovered"] += 1
            for c in resp.lost:
                if c in pending:
                    pending.discard(c)
                    lost.add(c)
                    self.stats["lost"] += 1
                    log.info("%s: update %s/%s#%d permanently lost", self.endpoint, sender, kg, c)
            self.storage.meta_put(key, replace(cur, pending=frozenset(pending), lost=frozenset(lost)))
        if refresh:
            self.config_refresh()

    # ------------------------------------------------------------ serving peers
    def _serve(self, payload: bytes, respond: Callable[[bytes], None], sender: str) -> None:
        try:
            req = decode(payload)
        except DecodeError as exc:
            respond(encode(Response(exc.code, str(exc), None)))
            return
        if isinstance(req, SignedRequest):
            self._serve_client(req, respond)
            return
        try:
            if isinstance(req, RecoveryRequest):
                result = self._serve_recovery(req)
            elif isinstance(req, SyncRequest):
                result = self._serve_sync(req)
            else:
                raise DecodeError(f"unexpected request {type(req).__name__}")
            respond(encode(Response("OK", "", result)))
        except FogError as exc:
            respond(encode(Response(exc.code, str(exc), None)))

    def _peer_meta(self, kg: KeygroupName, requester: str) -> KeygroupMetadata:
        meta = self.cached(kg)
        if meta is None or not meta.is_replica(self.node):
            raise UnknownKeygroup(f"{self.node} does not replicate {kg}")
        if requester not in meta.members:
            raise Forbidden(f"{requester} is not a member of {kg}")
        return meta

    def _serve_recovery(self, req: RecoveryRequest) -> RecoveryResponse:
        meta = self._peer_meta(req.keygroup, req.requester)
        name = str(req.keygroup)
        now = self.now()
        latest = self.storage.meta_get(("counter", name), 0)
        buffered = dict(self.storage.meta_get(("buffer", name), ()))
        by_key: dict[str, list[int]] = {}
        lost = []
        for c in req.counters:
            if c > latest:
                continue
            k = buffered.get(c)
            if k is None:
                lost.append(c)
            else:
                by_key.setdefault(k, []).append(c)
        items = []
        for k, counters in sorted(by_key.items()):
            record = self.storage.get(req.keygroup, k, now)
            if record is None:
                lost.extend(counters)
                continue
            items.append(RecoveredItem(tuple(counters), seal_record(record, meta.secret, self.entropy)))
        self.stats["recovery_served"] += 1
        return RecoveryResponse(tuple(items), tuple(sorted(lost)))

    def _serve_sync(self, req: SyncRequest) -> SyncResponse:
        meta = self._peer_meta(req.keygroup, req.requester)
        latest = self.storage.meta_get(("counter", str(req.keygroup)), 0)
        records: tuple = ()
        if req.want_records:
            records = tuple(
                seal_record(r, meta.secret, self.entropy)
                for r in self.storage.snapshot(req.keygroup, self.now()).values()
            )
        return SyncResponse(latest, records)

    # ------------------------------------------------------------ client protocol
    def _serve_client(self, signed: SignedRequest, respond: Callable[[bytes], None]) -> None:
        try:
            req = decode(signed.body, ClientRequest)
        except DecodeError as exc:
            respond(encode(Response(exc.code, str(exc), None)))
            return

        def reply(result: Any = None, err: FogError | None = None) -> None:
            if err is not None:
                respond(encode(Response(err.code, err.message or str(err), None, req.nonce)))
            else:
                respond(encode(Response("OK", "", result, req.nonce)))

        def with_key(desc: ClientDescriptor | None, err: FogError | None) -> None:
            if err is not None:
                reply(err=Unauthenticated(f"unknown client {req.client}: {err}"))
                return
            try:
                verify(desc.public_key, signed.signature, signed.body)
                self._client_guard.check(req.client, req.counter, req.nonce)
            except SignatureInvalid:
                reply(err=Unauthenticated("client signature does not verify"))
                return
            except ReplayDetected as exc:
                reply(err=exc)
                return
            self._run_client_op(req, reply)

        self._client_key(req.client, with_key)

    def _client_key(self, client: str, cb) -> None:
        desc = self.storage.meta_get(("client", client))
        if desc is not None:
            cb(desc, None)
            return

        def got(result, err) -> None:
            if err is None and isinstance(result, ClientDescriptor):
                self.storage.meta_put(("client", client), result)
                cb(result, None)
            else:
                cb(None, err or Unauthenticated("no such client"))

        try:
            self._naming_call("get_config", (EntityId("client", client), None), got)
        except FogError as exc:
            cb(None, exc)

    def _run_client_op(self, req: ClientRequest, reply) -> None:
        op, args, client = req.op, req.args, req.client
        try:
            if op == "put":
                kg, sealed = args
                kg = as_keygroup(kg)
                meta = self._require(kg, client, write=True)
                draft = open_record(sealed, self.keyring(kg))
                if draft.keygroup != kg:
                    raise Forbidden("record sealed for another keygroup")
                reply(self.handle_put(client, kg, draft.key, dict(draft.fields)))
            elif op == "delete":
                kg, key = args
                reply(self.handle_delete(client, kg, key))
            elif op == "get":
                kg, key = args
                kg = as_keygroup(kg)
                record = self.handle_get(client, kg, key)
                meta = self.cached(kg)
                reply(None if record is None else seal_record(record, meta.secret, self.entropy))
            elif op == "trigger_subscribe":
                (kg,) = args
                kg = as_keygroup(kg)
                meta = self._require(kg, client, write=False)
                if not meta.is_trigger(self.node):
                    raise NotTriggerNode(f"{self.node} is not a trigger node of {kg}")
                # remote consumers poll by offset, so nothing is registered here
                reply(len(self.storage.meta_get(("trigger", str(kg)), ())))
            elif op == "trigger_poll":
                kg, offset, limit = args
                kg = as_keygroup(kg)
                meta = self._require(kg, client, write=False)
                if not meta.is_trigger(self.node):
                    raise NotTriggerNode(f"{self.node} is not a trigger node of {kg}")
                stream = self.storage.meta_get(("trigger", str(kg)), ())
                chunk = stream[offset:offset + limit]
                reply(TriggerBatch(
                    offset + len(chunk),
                    tuple(seal_record(r, meta.secret, self.entropy) for r in chunk),
                ))
            elif op == "naming":
                (frame,) = args
                self._proxy_naming(frame, reply)
            else:
                raise DecodeError(f"unknown client operation {op!r}")
        except FogError as exc:
            reply(err=exc)
        except (ValueError, TypeError) as exc:
            reply(err=DecodeError(f"bad arguments for {op}: {exc}"))

    def _proxy_naming(self, frame: bytes, reply) -> None:
        def done(resp: bytes | None, err: Exception | None) -> None:
            if err is not None:
                reply(err=NamingUnreachable(str(err)))
                return
            reply(resp)
            # keygroup changes made through this machine show up here first
            self.config_refresh()

        self.bus.request_async(self.endpoint, self.naming_endpoint, frame,
                               self.config.naming_timeout_ms, done)

    # ------------------------------------------------------------ configuration
    def _naming_call(self, op: str, args: tuple, callback) -> None:
        frame, nonce = self.naming.build(op, args, self.now())

        def done(resp: bytes | None, err: Exception | None) -> None:
            if err is not None:
                callback(None, NamingUnreachable(str(err)))
                return
            try:
                result = self.naming.read(resp, nonce)
            except FogError as exc:
                callback(None, exc)
                return
            callback(result, None)

        self.bus.request_async(self.endpoint, self.naming_endpoint, frame,
                               self.config.naming_timeout_ms, done)

    def _periodic_refresh(self) -> None:
        if self._is_leader():
            self.config_refresh()

    def config_refresh(self, then: Callable[[], None] | None = None) -> None:
        """Ask the naming service for everything that changed since the
        cached versions; on failure keep serving from the cache."""
        if then is not None:
            self._refresh_waiters.append(then)
        if self._refreshing or not self.running:
            return
        self._refreshing = True
        cached = {str(m.name): m.version for m in self.cached_keygroups()}

        def done(view: SyncView | None, err: FogError | None) -> None:
            self._refreshing = False
            if err is not None:
                self.stats["refresh_failures"] += 1
                log.info("%s: config refresh failed: %s", self.endpoint, err)
            elif self.running:
                self._absorb_view(view)
            waiters, self._refresh_waiters = self._refresh_waiters, []
            for w in waiters:
                w()

        self.stats["refreshes"] += 1
        self._naming_call("sync_view", (cached,), done)

    def _absorb_view(self, view: SyncView) -> None:
        now = self.now()
        joined = []
        for meta in view.changed:
            name = str(meta.name)
            old = self.cached(name)
            ring = self.storage.meta_get(("secrets", name), ())
            kept = tuple(
                (s, now + self.config.secret_grace_ms if exp is None else exp)
                for s, exp in ring
                if s.version != meta.secret.version and (exp is None or exp > now)
            )
            self.storage.meta_put(("secrets", name), kept + ((meta.secret, None),))
            self.storage.meta_put(("cfg", name), meta)
            self.storage.register_keygroup(meta.name, meta.ttl_of(self.node))
            was_replica = old is not None and old.is_replica(self.node)
            if old is None or (meta.is_replica(self.node) and not was_replica):
                joined.append(meta)
        for name in view.removed:
            self.storage.meta_delete(("cfg", name))
            self.storage.meta_delete(("secrets", name))
            for k in self.storage.meta_keys(("cursor",)):
                if k[2] == name:
                    self.storage.meta_delete(k)
        self.storage.meta_put(("dir",), dict(view.directory))
        self.storage.meta_update(("cfg_gen",), lambda g: (g or 0) + 1)
        self._reconcile()
        for meta in joined:
            self._start_join(meta)

    def _start_join(self, meta: KeygroupMetadata) -> None:
        """Baseline every remote replica's stream and copy existing records
        from one remaining replica."""
        senders = sorted(n for n in meta.replica_nodes if n != self.node)
        state = _JoinState(set(senders))
        self._joins[str(meta.name)] = state
        source = senders[0] if senders else None
        if source is not None and self.config.sync_source == "largest":
            source = senders[-1]
        for s in senders:
            self._join_one(meta.name, s, want_records=(s == source), state=state)

    def _join_one(self, kg: KeygroupName, sender: str, want_records: bool, state: _JoinState) -> None:
        if not self.running or self._joins.get(str(kg)) is not state:
            return
        machines = self.directory().get(sender, ())
        attempt = state.attempt
        state.attempt += 1
        delay = min(self.config.recovery_base_ms * 2 ** min(attempt, 10), self.config.recovery_cap_ms)
        if not machines:
            self._later(delay, self._join_one, kg, sender, want_records, state)
            return
        _, address = machines[attempt % len(machines)]

        def done(resp: bytes | None, err: Exception | None) -> None:
            if not self.running:
                return
            try:
                if err is not None:
                    raise err
                result: SyncResponse = decode(resp, Response).unwrap()
            except Exception:
                self._later(delay, self._join_one, kg, sender, want_records, state)
                return
            now = self.now()
            ring = self.keyring(kg)
            for sealed in result.records:
                try:
                    self._apply(kg, open_record(sealed, ring), now)
                except (UnknownSecretVersion, AuthenticationFailed):
                    self.stats["decrypt_failures"] += 1
            key = ("cursor", sender, str(kg))
            base = result.latest_counter
            self.storage.meta_put(key, Cursor(base, base, base))
            state.remaining.discard(sender)
            self.stats["joins"] += 1

        req = SyncRequest(kg, self.node, want_records)
        self.bus.request_async(self.endpoint, address, encode(req),
                               self.config.request_timeout_ms * 5, done)

    def joined(self, kg: KeygroupName | str) -> bool:
        meta = self.cached(kg)
        if meta is None:
            return False
        return all(
            self._cursor(s, meta.name) is not None
            for s in meta.replica_nodes if s != self.node
        )

    # ------------------------------------------------------------ membership
    def _remote_nodes(self) -> set[str]:
        return {n for m in self.cached_keygroups() for n in m.members if n != self.node}

    def _heartbeat(self) -> None:
        self.storage.membership_heartbeat(self.name, self.now())
        gen = self.storage.meta_get(("cfg_gen",), 0)
        mine = self._my_responsibility()
        if mine != self._responsible or gen != self._cfg_gen_seen:
            self._reconcile()

    def _my_responsibility(self) -> set[str]:
        remote = self._remote_nodes()
        if not remote:
            return set()
        live = self.live_machines()
        if self.name not in live:
            return set()
        assignment = rebalance(live, remote)
        return {r for r, m in assignment.items() if m == self.name}

    def responsibility(self) -> dict[str, str]:
        return rebalance(self.live_machines(), self._remote_nodes())

    def _reconcile(self) -> None:
        """Bring subscriptions in line with responsibility and membership."""
        self._cfg_gen_seen = self.storage.meta_get(("cfg_gen",), 0)
        mine = self._my_responsibility()
        adopted = mine - self._responsible
        self._responsible = mine
        directory = self.directory()
        wanted: set[tuple[str, str]] = set()
        for meta in self.cached_keygroups():
            if self.node not in meta.members:
                continue
            for sender in meta.replica_nodes:
                if sender == self.node or sender not in mine:
                    continue
                for _, address in directory.get(sender, ()):
                    wanted.add((str(meta.name), address))
        for key in sorted(set(self._subs) - wanted):
            self.bus.unsubscribe(self._subs.pop(key))
        for topic, address in sorted(wanted - set(self._subs)):
            self._subs[(topic, address)] = self.bus.subscribe(
                self.endpoint, topic, self._on_message, source=address
            )
        for sender in sorted(adopted):
            for meta in self.cached_keygroups():
                if sender in meta.replica_nodes:
                    self._schedule_recovery(sender, meta.name, self.config.gap_grace_ms)

    def subscriptions(self) -> list[tuple[str, str]]:
        return sorted(self._subs)

    def _beacon(self) -> None:
        if not self._is_leader():
            return
        for meta in self.cached_keygroups():
            if not meta.is_replica(self.node):
                continue
            latest = self.storage.meta_get(("counter", str(meta.name)), 0)
            if latest:
                beacon = CounterBeacon(self.node, meta.name, latest)
                self.bus.publish(self.endpoint, str(meta.name), encode(beacon))

    # ------------------------------------------------------------ expiry
    def _schedule_sweep(self) -> None:
        ttls = [m.ttl_of(self.node) for m in self.cached_keygroups() if m.is_replica(self.node)]
        finite = [t for t in ttls if t is not None]
        period = sweep_period(min(finite) if finite else None,
                              self.config.sweep_floor_ms, self.config.sweep_max_ms)
        self._later(period, self._sweep)

    def _sweep(self) -> None:
        now = self.now()
        metas = {str(m.name): m for m in self.cached_keygroups()}
        finite = [t for m in metas.values() for t in [m.ttl_of(self.node)] if t is not None]
        horizon = (
            self.config.compaction_factor * max(finite) if finite else self.config.compaction_default_ms
        )
        for kg in self.storage.keygroups():
            meta = metas.get(str(kg))
            ttl = meta.ttl_of(self.node) if meta is not None else self.storage.ttl(kg)
            gone = self.storage.sweep_expired(kg, ttl, now)
            self.stats["expired"] += len(gone)
            self.storage.compact_tombstones(kg, horizon, now)
        self._schedule_sweep()

    # ------------------------------------------------------------ reporting
    def loss_accounting(self) -> dict[tuple[str, str], Cursor]:
        return {
            (k[1], k[2]): self.storage.meta_get(k)
            for k in self.storage.meta_keys(("cursor",))
        }
