"""Strictly consistent registry of identities and keygroup configuration.

All mutations go through one lock and are appended to a journal as fully
resolved entries (generated secrets included), then applied by
:meth:`NamingService._apply`. Replaying the journal into a fresh service
therefore reproduces the exact state, which is how the file-backed journal
recovers after a restart.
"""

from __future__ import annotations

import os
import struct
import threading
from collections.abc import Iterable
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .codec import decode, encode, wire
from .crypto import (
    Entropy,
    KeyPair,
    ReplayGuard,
    SealedControl,
    SystemEntropy,
    new_secret,
    open_control,
    rotate_secret,
    verify,
)
from .errors import (
    AlreadyBootstrapped,
    AlreadyMember,
    DecodeError,
    FogError,
    Forbidden,
    LastReplica,
    MalformedName,
    MalformedRegion,
    NameTaken,
    NotFound,
    ReplayDetected,
    SignatureInvalid,
    StillReferenced,
    Unauthenticated,
    UnknownKeygroup,
    UnknownNode,
    UnknownParentNode,
    from_code,
)
from .identity import Identity, parse_entity
from .model import (
    ClientDescriptor,
    EntityId,
    KeygroupMetadata,
    KeygroupName,
    MachineDescriptor,
    NodeDescriptor,
    ReplicaConfig,
)

Descriptor = NodeDescriptor | MachineDescriptor | ClientDescriptor

CHANGE_KINDS = (
    "add_replica", "remove_replica", "add_trigger", "remove_trigger",
    "set_ttl", "add_client", "remove_client",
)
NODE_ADDS = ("add_replica", "add_trigger")


# ---------------------------------------------------------------- wire types


@wire
@dataclass(frozen=True)
class AuthContext:
    caller: EntityId
    proof: bytes


@wire
@dataclass(frozen=True)
class NamingRequest:
    op: str
    args: tuple
    nonce: bytes
    counter: int
    shard_key: str = ""  # reserved; sharding is not implemented


@wire
@dataclass(frozen=True)
class Response:
    status: str  # "OK" or an error code
    message: str
    payload: Any
    request_nonce: bytes = b""

    def unwrap(self) -> Any:
        if self.status != "OK":
            raise from_code(self.status, self.message)
        return self.payload


@wire
@dataclass(frozen=True)
class KeygroupChange:
    kind: str
    target: str
    ttl_ms: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in CHANGE_KINDS:
            raise ValueError(f"unknown keygroup change {self.kind!r}")


def AddReplica(node: str, ttl_ms: int | None = None) -> KeygroupChange:
    return KeygroupChange("add_replica", node, ttl_ms)


def RemoveReplica(node: str) -> KeygroupChange:
    return KeygroupChange("remove_replica", node)


def AddTrigger(node: str) -> KeygroupChange:
    return KeygroupChange("add_trigger", node)


def RemoveTrigger(node: str) -> KeygroupChange:
    return KeygroupChange("remove_trigger", node)


def SetTtl(node: str, ttl_ms: int | None) -> KeygroupChange:
    return KeygroupChange("set_ttl", node, ttl_ms)


def AddClient(client: str) -> KeygroupChange:
    return KeygroupChange("add_client", client)


def RemoveClient(client: str) -> KeygroupChange:
    return KeygroupChange("remove_client", client)


@wire
@dataclass(frozen=True)
class UpToDate:
    version: int


@wire
@dataclass(frozen=True)
class BoundingBox:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon


WORLD = BoundingBox(-90.0, -180.0, 90.0, 180.0)


@wire
@dataclass(frozen=True)
class SyncView:
    """Everything a node needs to refresh its cached configuration in one call."""

    changed: tuple[KeygroupMetadata, ...]
    removed: tuple[str, ...]
    directory: Any  # node name -> tuple of (machine name, address)
    log_version: int


# ---------------------------------------------------------------- journals


class MemoryJournal:
    def __init__(self) -> None:
        self._entries: list[bytes] = []

    def append(self, entry: bytes) -> None:
        self._entries.append(entry)

    def entries(self) -> list[bytes]:
        return list(self._entries)


def _intact_length(data: bytes) -> int:
    pos = 0
    while pos + 4 <= len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        if pos + 4 + n > len(data):
            break
        pos += 4 + n
    return pos


class FileJournal:
    """Write-ahead log of length-prefixed entries; torn tails are ignored."""

    def __init__(self, path: str | os.PathLike, fsync: bool = True) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        if self.path.exists():
            good = _intact_length(self.path.read_bytes())
            if good < self.path.stat().st_size:
                with open(self.path, "r+b") as fh:
                    fh.truncate(good)
        self._fh = open(self.path, "ab")

    def append(self, entry: bytes) -> None:
        self._fh.write(struct.pack(">I", len(entry)) + entry)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def entries(self) -> list[bytes]:
        data = self.path.read_bytes()
        out, pos, end = [], 0, _intact_length(data)
        while pos < end:
            (n,) = struct.unpack(">I", data[pos:pos + 4])
            out.append(data[pos + 4:pos + 4 + n])
            pos += 4 + n
        return out

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------- service


class NamingService:
    def __init__(
        self,
        keypair: KeyPair,
        entropy: Entropy | None = None,
        journal: MemoryJournal | FileJournal | None = None,
        clock=None,
    ) -> None:
        self.keypair = keypair
        self.entropy = entropy or SystemEntropy()
        self.journal = journal or MemoryJournal()
        self.clock = clock
        self.endpoint = "naming"
        self._lock = threading.RLock()
        self._entities: dict[tuple[str, str], Descriptor] = {}
        self._status: dict[tuple[str, str], str] = {}
        self._entity_version: dict[tuple[str, str], int] = {}
        self._keygroups: dict[str, KeygroupMetadata] = {}
        self.log_version = 0
        self._wire_guard = ReplayGuard()
        self._body_guard = ReplayGuard()
        self.accepted: list[tuple] = []
        self._me = Identity(EntityId("node", "naming"), keypair, self.entropy)
        for raw in self.journal.entries():
            self._apply(decode(raw, tuple), persist=False)

    @property
    def public(self) -> bytes:
        return self.keypair.public

    # -- state application
    def _commit(self, entry: tuple) -> None:
        self._apply(entry, persist=True)

    def _apply(self, entry: tuple, persist: bool) -> None:
        if persist:
            self.journal.append(encode(entry))
        self.accepted.append(entry)
        self.log_version += 1
        op = entry[0]
        if op == "register":
            desc = entry[1]
            key = _key_of(desc)
            self._entities[key] = desc
            self._status[key] = "active"
            self._entity_version[key] = self.log_version
            if isinstance(desc, MachineDescriptor):
                self._set_machines(desc.node, lambda ms: ms + (desc.name,))
        elif op == "tombstone":
            key = (entry[1], entry[2])
            self._status[key] = "tombstoned"
            self._entity_version[key] = self.log_version
            desc = self._entities[key]
            if isinstance(desc, MachineDescriptor):
                self._set_machines(desc.node, lambda ms: tuple(m for m in ms if m != desc.name))
        elif op == "keygroup":
            meta = entry[1]
            self._keygroups[str(meta.name)] = meta
        else:
            raise DecodeError(f"unknown journal entry {op!r}")

    def _set_machines(self, node: str, fn) -> None:
        key = ("node", node)
        desc = self._entities[key]
        self._entities[key] = replace(desc, machine_ids=tuple(sorted(set(fn(desc.machine_ids)))))
        self._entity_version[key] = self.log_version

    def snapshot(self) -> bytes:
        """Canonical encoding of the complete state, for equivalence checks."""
        with self._lock:
            return encode((
                {f"{k}:{n}": d for (k, n), d in self._entities.items()},
                {f"{k}:{n}": s for (k, n), s in self._status.items()},
                dict(self._keygroups),
                self.log_version,
            ))

    @classmethod
    def replay(cls, keypair: KeyPair, entries: Iterable[tuple]) -> NamingService:
        journal = MemoryJournal()
        for e in entries:
            journal.append(encode(e))
        return cls(keypair, journal=journal)

    # -- lookups
    def _active(self, kind: str, name: str) -> Descriptor | None:
        key = (kind, name)
        if self._status.get(key) == "active":
            return self._entities[key]
        return None

    def status(self, kind: str, name: str) -> str | None:
        return self._status.get((kind, name))

    def _keygroup(self, name: KeygroupName) -> KeygroupMetadata:
        meta = self._keygroups.get(str(name))
        if meta is None:
            raise UnknownKeygroup(f"no keygroup {name}")
        return meta

    # -- bootstrap (local administrative call, no authentication)
    def bootstrap(self, initial_node: NodeDescriptor, initial_client: ClientDescriptor) -> None:
        with self._lock:
            if self.log_version or self._entities:
                raise AlreadyBootstrapped("naming service already holds state")
            self._commit(("register", initial_node))
            self._commit(("register", initial_client))

    # -- authenticated entry points
    def execute(self, auth: AuthContext, body: bytes) -> Any:
        """Verify ``auth`` as a signature over ``body`` and run the request."""
        with self._lock:
            caller = self._authenticate(auth.caller)
            try:
                verify(caller.public_key, auth.proof, body)
            except SignatureInvalid as exc:
                raise Unauthenticated("request signature does not verify") from exc
            request = _decode_request(body)
            self._body_guard.check(str(auth.caller), request.counter, request.nonce)
            return self._dispatch(auth.caller, request)

    def handle_frame(self, frame: bytes, respond, sender: str = "") -> None:
        """Transport request handler: SealedControl in, SealedControl out."""
        respond(self.serve_sealed(frame))

    def serve_sealed(self, frame: bytes) -> bytes:
        with self._lock:
            try:
                sealed = decode(frame, SealedControl)
                caller_id = parse_entity(sealed.sender)
                caller = self._authenticate(caller_id)
            except (DecodeError, MalformedName, ValueError, Unauthenticated) as exc:
                return encode(Response(Unauthenticated.code, str(exc), None))
            try:
                body = open_control(sealed, self.keypair, caller.public_key, self._wire_guard)
            except SignatureInvalid as exc:
                return encode(Response(Unauthenticated.code, str(exc), None))
            except ReplayDetected as exc:
                return encode(Response(exc.code, str(exc), None))
            except FogError as exc:
                return encode(Response(exc.code, str(exc), None))
            nonce = b""
            try:
                request = _decode_request(body)
                nonce = request.nonce
                response = Response("OK", "", self._dispatch(caller_id, request), nonce)
            except FogError as exc:
                response = Response(exc.code, exc.message or str(exc), None, nonce)
            now = self.clock.time() if self.clock is not None else 0.0
            return encode(self._me.seal(encode(response), caller.public_key, now))

    def _authenticate(self, caller: EntityId) -> Descriptor:
        if caller.kind not in ("node", "client"):
            raise Unauthenticated(f"{caller.kind} entities cannot authenticate")
        desc = self._active(caller.kind, caller.name)
        if desc is None or not desc.public_key:
            raise Unauthenticated(f"{caller} is not an active registered entity")
        return desc

    def _dispatch(self, caller: EntityId, request: NamingRequest) -> Any:
        handler = getattr(self, f"_op_{request.op}", None)
        if handler is None:
            raise DecodeError(f"unknown naming operation {request.op!r}")
        try:
            return handler(caller, *request.args)
        except TypeError as exc:
            raise DecodeError(f"bad arguments for {request.op}: {exc}") from exc

    # -- operations; ``caller`` is already authenticated
    def _op_register(self, caller: EntityId, desc: Descriptor) -> EntityId:
        if not isinstance(desc, (NodeDescriptor, MachineDescriptor, ClientDescriptor)):
            raise DecodeError("register expects a node, machine or client descriptor")
        key = _key_of(desc)
        if key in self._status:
            raise NameTaken(f"{key[0]} name {key[1]!r} was already used")
        if isinstance(desc, MachineDescriptor) and self._active("node", desc.node) is None:
            raise UnknownParentNode(f"no active node {desc.node!r}")
        if isinstance(desc, NodeDescriptor) and desc.machine_ids:
            raise DecodeError("machines join a node by registering themselves")
        self._commit(("register", desc))
        return EntityId(*key)

    def _op_tombstone(self, caller: EntityId, target: EntityId) -> None:
        key = (target.kind, target.name)
        desc = self._active(*key)
        if desc is None:
            raise NotFound(f"no active {target}")
        if caller.kind == "node":
            own_machine = isinstance(desc, MachineDescriptor) and desc.node == caller.name
            if not own_machine:
                raise Forbidden("nodes may only tombstone their own machines")
        if target.kind == "node":
            using = sorted(n for n, m in self._keygroups.items() if target.name in m.members)
            if using:
                raise StillReferenced(f"node {target.name} is a member of {', '.join(using)}")
        self._commit(("tombstone", *key))

    def _op_create_keygroup(self, caller: EntityId, name: KeygroupName, replica: str,
                            ttl_ms: int | None = None) -> KeygroupMetadata:
        if caller.kind != "client":
            raise Forbidden("only application clients create keygroups")
        if not isinstance(name, KeygroupName):
            raise DecodeError("keygroup name expected")
        if str(name) in self._keygroups:
            raise NameTaken(f"keygroup {name} exists")
        if self._active("node", replica) is None:
            raise UnknownNode(f"no active node {replica!r}")
        meta = KeygroupMetadata(
            name, 1, {replica: ReplicaConfig(ttl_ms)}, frozenset(),
            frozenset({caller.name}), new_secret(self.entropy),
        )
        self._commit(("keygroup", meta))
        return meta

    def _op_update_keygroup(self, caller: EntityId, name: KeygroupName,
                            change: KeygroupChange) -> KeygroupMetadata:
        meta = self._keygroup(name)
        if not isinstance(change, KeygroupChange):
            raise DecodeError("keygroup change expected")
        if caller.kind == "client":
            if caller.name not in meta.authorized_clients:
                raise Forbidden(f"client {caller.name} is not authorized for {name}")
        else:
            if caller.name not in meta.members:
                raise Forbidden(f"node {caller.name} is not a member of {name}")
            if change.kind not in NODE_ADDS:
                raise Forbidden("nodes may only add other nodes to their keygroups")
            if change.target == caller.name:
                raise Forbidden("nodes cannot add themselves to keygroups")
        new = _apply_change(meta, change, self._active, self.entropy)
        self._commit(("keygroup", new))
        return new

    def _op_get_config(self, caller: EntityId, target: Any, cached_version: int | None = None):
        if isinstance(target, KeygroupName):
            meta = self._keygroups.get(str(target))
            if meta is None:
                raise NotFound(f"no keygroup {target}")
            allowed = (
                caller.name in meta.members if caller.kind == "node"
                else caller.name in meta.authorized_clients
            )
            if not allowed:
                raise Forbidden(f"{caller} may not read {target}")
            if cached_version == meta.version:
                return UpToDate(meta.version)
            return meta
        if isinstance(target, EntityId):
            key = (target.kind, target.name)
            desc = self._active(*key)
            if desc is None:
                raise NotFound(f"no active {target}")
            version = self._entity_version[key]
            if cached_version == version:
                return UpToDate(version)
            return desc
        raise DecodeError("get_config expects a keygroup name or entity id")

    def _op_query_region(self, caller: EntityId, bbox: BoundingBox) -> tuple[NodeDescriptor, ...]:
        if not isinstance(bbox, BoundingBox):
            raise DecodeError("bounding box expected")
        if bbox.min_lat > bbox.max_lat or bbox.min_lon > bbox.max_lon:
            raise MalformedRegion("min bound exceeds max bound")
        nodes = [
            d for (k, n), d in self._entities.items()
            if k == "node" and self._status[(k, n)] == "active" and bbox.contains(d.latitude, d.longitude)
        ]
        return tuple(sorted(nodes, key=lambda d: d.name))

    def _op_sync_view(self, caller: EntityId, cached: Any) -> SyncView:
        if caller.kind != "node":
            raise Forbidden("sync_view is for nodes")
        cached = dict(cached or {})
        mine = {n: m for n, m in self._keygroups.items() if caller.name in m.members}
        changed = tuple(m for n, m in sorted(mine.items()) if cached.get(n) != m.version)
        removed = tuple(sorted(n for n in cached if n not in mine))
        nodes = sorted({node for m in mine.values() for node in m.members} | {caller.name})
        directory = {}
        for node in nodes:
            desc = self._active("node", node)
            if desc is None:
                continue
            directory[node] = tuple(
                (m, self._entities[("machine", m)].address)
                for m in desc.machine_ids
                if self._status.get(("machine", m)) == "active"
            )
        return SyncView(changed, removed, directory, self.log_version)

    # -- convenience for in-process callers that hold an identity
    def call(self, identity: Identity, op: str, *args) -> Any:
        request = NamingRequest(op, args, identity.entropy.token_bytes(16),
                                identity.counter.next(self.clock.time() if self.clock else 0.0))
        body = encode(request)
        return self.execute(AuthContext(identity.entity, identity.sign(body)), body)

    def entities(self, kind: str, active_only: bool = True) -> list[Descriptor]:
        return [
            d for (k, n), d in sorted(self._entities.items())
            if k == kind and (not active_only or self._status[(k, n)] == "active")
        ]

    def keygroup(self, name: str | KeygroupName) -> KeygroupMetadata | None:
        return self._keygroups.get(str(name))


def _key_of(desc: Descriptor) -> tuple[str, str]:
    if isinstance(desc, NodeDescriptor):
        return ("node", desc.name)
    if isinstance(desc, MachineDescriptor):
        return ("machine", desc.name)
    return ("client", desc.name)


def _decode_request(body: bytes) -> NamingRequest:
    return decode(body, NamingRequest)


def _apply_change(meta: KeygroupMetadata, change: KeygroupChange, active, entropy: Entropy) -> KeygroupMetadata:
    replicas = dict(meta.replica_nodes)
    triggers = set(meta.trigger_nodes)
    clients = set(meta.authorized_clients)
    secret = meta.secret
    kind, target = change.kind, change.target
    if kind in ("add_replica", "add_trigger"):
        if active("node", target) is None:
            raise UnknownNode(f"no active node {target!r}")
        if kind == "add_replica":
            if target in replicas:
                raise AlreadyMember(f"{target} is already a replica node")
            replicas[target] = ReplicaConfig(change.ttl_ms)
        else:
            if target in triggers:
                raise AlreadyMember(f"{target} is already a trigger node")
            triggers.add(target)
    elif kind == "remove_replica":
        if target not in replicas:
            raise UnknownNode(f"{target} is not a replica node")
        if len(replicas) == 1:
            raise LastReplica(f"{target} is the last replica of {meta.name}")
        del replicas[target]
        secret = rotate_secret(secret, entropy)
    elif kind == "remove_trigger":
        if target not in triggers:
            raise UnknownNode(f"{target} is not a trigger node")
        triggers.discard(target)
        secret = rotate_secret(secret, entropy)
    elif kind == "set_ttl":
        if target not in replicas:
            raise UnknownNode(f"{target} is not a replica node")
        replicas[target] = ReplicaConfig(change.ttl_ms)
    elif kind == "add_client":
        if active("client", target) is None:
            raise NotFound(f"no active client {target!r}")
        if target in clients:
            raise AlreadyMember(f"{target} is already authorized")
        clients.add(target)
    elif kind == "remove_client":
        if target not in clients:
            raise NotFound(f"{target} is not authorized")
        clients.discard(target)
    return KeygroupMetadata(meta.name, meta.version + 1, replicas, frozenset(triggers),
                            frozenset(clients), secret)


class NamingClient:
    """Builds sealed naming requests for an identity and reads the replies."""

    def __init__(self, identity: Identity, naming_public: bytes) -> None:
        self.identity = identity
        self.naming_public = naming_public

    def build(self, op: str, args: tuple, now_ms: float) -> tuple[bytes, bytes]:
        nonce = self.identity.entropy.token_bytes(16)
        request = NamingRequest(op, tuple(args), nonce, self.identity.counter.next(now_ms))
        sealed = self.identity.seal(encode(request), self.naming_public, now_ms)
        return encode(sealed), nonce

    def read(self, frame: bytes, nonce: bytes) -> Any:
        """Open a reply frame and return its payload or raise its error."""
        obj = decode(frame)
        if isinstance(obj, Response):
            # unsealed replies only ever report authentication failures
            if obj.status == "OK":
                raise Unauthenticated("unsigned success reply rejected")
            raise from_code(obj.status, obj.message)
        if not isinstance(obj, SealedControl):
            raise DecodeError("unexpected naming reply")
        body = open_control(obj, self.identity.keypair, self.naming_public)
        response = decode(body, Response)
        if response.request_nonce and response.request_nonce != nonce:
            raise ReplayDetected("reply does not match request")
        return response.unwrap()
