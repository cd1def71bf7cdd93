"""Client library: signed requests to any machine of a node, plus the
declarative keygroup helpers used by mobile applications."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any, Protocol

from .codec import decode, encode
from .crypto import SealedRecord, open_record, seal_record
from .daemon import Ack, ClientRequest, SignedRequest, TriggerBatch
from .errors import (
    AuthenticationFailed,
    FogError,
    NamingUnreachable,
    NoOpMovement,
    NotFound,
    Timeout,
    UnknownKeygroup,
    UnknownNode,
    UnknownSecretVersion,
)
from .identity import Identity
from .model import DataRecord, KeygroupMetadata, KeygroupName, as_keygroup
from .naming import (
    WORLD,
    AddClient,
    AddReplica,
    AddTrigger,
    BoundingBox,
    KeygroupChange,
    NamingClient,
    RemoveReplica,
    Response,
    UpToDate,
)


class Channel(Protocol):
    def call(self, frame: bytes) -> bytes: ...

    def now(self) -> float: ...


class LocalChannel:
    """In-process channel straight into a machine's request handler; drives
    the virtual clock while the reply is outstanding."""

    def __init__(self, machine, loop, timeout_ms: float = 5_000.0) -> None:
        self.machine = machine
        self.loop = loop
        self.timeout_ms = timeout_ms

    def now(self) -> float:
        return self.loop.time()

    def call(self, frame: bytes) -> bytes:
        box: list[bytes] = []
        self.machine._serve(frame, box.append, "local-client")
        if not box:
            self.loop.run_while(lambda: not box, self.loop.time() + self.timeout_ms)
        if not box:
            raise Timeout(f"no reply from {self.machine.endpoint}")
        return box[0]


class BusChannel:
    """Request/response over a bus (simulated or sockets)."""

    def __init__(self, bus, source: str, target: str, clock, timeout_ms: float = 5_000.0) -> None:
        self.bus = bus
        self.source = source
        self.target = target
        self.clock = clock
        self.timeout_ms = timeout_ms

    def now(self) -> float:
        return self.clock.time()

    def call(self, frame: bytes) -> bytes:
        return self.bus.request(self.source, self.target, frame, self.timeout_ms)


@dataclass
class ClientSession:
    identity: Identity
    naming_public: bytes
    channel: Channel
    metadata: dict[str, KeygroupMetadata] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._naming = NamingClient(self.identity, self.naming_public)

    @property
    def name(self) -> str:
        return self.identity.name

    # -- plumbing
    def _request(self, op: str, *args) -> Any:
        now = self.channel.now()
        req = ClientRequest(op, tuple(args), self.name,
                            self.identity.entropy.token_bytes(16), self.identity.counter.next(now))
        body = encode(req)
        frame = encode(SignedRequest(body, self.identity.sign(body)))
        resp = decode(self.channel.call(frame), Response)
        if resp.request_nonce and resp.request_nonce != req.nonce:
            raise FogError("reply does not match request")
        return resp.unwrap()

    def naming_call(self, op: str, *args) -> Any:
        """A naming-service operation, relayed verbatim by the daemon."""
        frame, nonce = self._naming.build(op, args, self.channel.now())
        reply = self._request("naming", frame)
        if not isinstance(reply, bytes):
            raise NamingUnreachable("daemon returned no naming reply")
        return self._naming.read(reply, nonce)

    # -- metadata
    def keygroup(self, name: str | KeygroupName, refresh: bool = False) -> KeygroupMetadata:
        kg = as_keygroup(name)
        cached = self.metadata.get(str(kg))
        if cached is not None and not refresh:
            return cached
        result = self.naming_call("get_config", kg, cached.version if cached else None)
        if isinstance(result, UpToDate):
            return cached
        self.metadata[str(kg)] = result
        return result

    def _with_secret(self, kg: KeygroupName, fn):
        meta = self.keygroup(kg)
        try:
            return fn(meta)
        except (UnknownSecretVersion, AuthenticationFailed):
            return fn(self.keygroup(kg, refresh=True))

    # -- data
    def put(self, kg: str | KeygroupName, key: str, fields: dict[str, bytes]) -> Ack:
        kg = as_keygroup(kg)

        def go(meta: KeygroupMetadata) -> Ack:
            draft = DataRecord(kg, key, fields, 0, self.name)
            return self._request("put", kg, seal_record(draft, meta.secret, self.identity.entropy))
        return self._with_secret(kg, go)

    def get(self, kg: str | KeygroupName, key: str) -> DataRecord | None:
        kg = as_keygroup(kg)
        sealed = self._request("get", kg, key)
        if sealed is None:
            return None
        return self._with_secret(kg, lambda meta: self._open(meta, sealed))

    def _open(self, meta: KeygroupMetadata, sealed: SealedRecord) -> DataRecord:
        return open_record(sealed, {meta.secret.version: meta.secret})

    def delete(self, kg: str | KeygroupName, key: str) -> Ack:
        return self._request("delete", as_keygroup(kg), key)

    # -- triggers
    def trigger_subscribe(self, kg: str | KeygroupName) -> int:
        return self._request("trigger_subscribe", as_keygroup(kg))

    def trigger_poll(self, kg: str | KeygroupName, offset: int, limit: int = 100) -> tuple[int, list[DataRecord]]:
        kg = as_keygroup(kg)
        batch: TriggerBatch = self._request("trigger_poll", kg, offset, limit)
        records = [self._with_secret(kg, lambda m, s=s: self._open(m, s)) for s in batch.records]
        return batch.offset, records

    # -- configuration
    def create_keygroup(self, name: str | KeygroupName, replica: str, ttl_ms: int | None = None) -> KeygroupMetadata:
        meta = self.naming_call("create_keygroup", as_keygroup(name), replica, ttl_ms)
        self.metadata[str(meta.name)] = meta
        return meta

    def update_keygroup(self, name: str | KeygroupName, change: KeygroupChange) -> KeygroupMetadata:
        meta = self.naming_call("update_keygroup", as_keygroup(name), change)
        self.metadata[str(meta.name)] = meta
        return meta

    def query_region(self, bbox: BoundingBox = WORLD) -> tuple:
        return self.naming_call("query_region", bbox)


def setup_keygroup(
    session: ClientSession,
    name: str | KeygroupName,
    replicas: Iterable[tuple[str, int | None]],
    triggers: Iterable[str] = (),
    clients: Iterable[str] = (),
) -> KeygroupMetadata:
    """Get-or-create ``name`` with at least the given members.

    Unknown nodes are rejected before anything is created, so a failed call
    never leaves a half-built keygroup behind.
    """
    kg = as_keygroup(name)
    replicas = list(replicas)
    triggers = list(triggers)
    if not replicas:
        raise UnknownNode("a keygroup needs at least one replica node")
    known = {d.name for d in session.query_region(WORLD)}
    for node in [n for n, _ in replicas] + triggers:
        if node not in known:
            raise UnknownNode(f"no active node {node!r}")
    try:
        meta = session.keygroup(kg, refresh=True)
    except (NotFound, UnknownKeygroup):
        first, ttl = replicas[0]
        meta = session.create_keygroup(kg, first, ttl)
    for node, ttl in replicas:
        if node not in meta.replica_nodes:
            meta = session.update_keygroup(kg, AddReplica(node, ttl))
    for node in triggers:
        if node not in meta.trigger_nodes:
            meta = session.update_keygroup(kg, AddTrigger(node))
    for client in clients:
        if client not in meta.authorized_clients:
            meta = session.update_keygroup(kg, AddClient(client))
    return meta


def on_movement(session: ClientSession, name: str | KeygroupName, old_replica: str,
                new_replica: str) -> KeygroupMetadata:
    """Swap the replica a mobile client uses; adds first so the keygroup
    never drops below its current replica count."""
    if old_replica == new_replica:
        raise NoOpMovement(f"already using {new_replica}")
    kg = as_keygroup(name)
    meta = session.keygroup(kg, refresh=True)
    if old_replica not in meta.replica_nodes:
        raise UnknownNode(f"{old_replica} is not a replica node of {kg}")
    if new_replica not in meta.replica_nodes:
        meta = session.update_keygroup(kg, AddReplica(new_replica, meta.ttl_of(old_replica)))
    return session.update_keygroup(kg, RemoveReplica(old_replica))
