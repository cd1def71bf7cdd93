"""Shared domain types, naming rules and the record merge rule."""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

from .codec import encode, wire
from .errors import KeyMismatch, MalformedName

TOKEN_RE = re.compile(r"[A-Za-z0-9_-]{1,128}")
ENTITY_KINDS = ("node", "machine", "client", "keygroup")


def check_token(token: object, what: str = "name") -> str:
    if not isinstance(token, str) or not TOKEN_RE.fullmatch(token):
        raise MalformedName(f"invalid {what} {token!r}: need 1-128 chars of [A-Za-z0-9_-]")
    return token


def _frozen_map(value: Mapping) -> Mapping:
    return MappingProxyType(dict(value))


@wire
@dataclass(frozen=True, order=True)
class EntityId:
    kind: str
    name: str

    def __post_init__(self) -> None:
        if self.kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind {self.kind!r}")
        if self.kind == "keygroup":
            validate_keygroup_name(self.name)
        else:
            check_token(self.name)

    def __str__(self) -> str:
        return f"{self.kind}:{self.name}"


@wire
@dataclass(frozen=True, order=True)
class KeygroupName:
    segments: tuple[str, ...]

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if len(segs) < 2:
            raise MalformedName(f"keygroup name needs at least 2 segments, got {len(segs)}")
        for seg in segs:
            check_token(seg, "keygroup segment")
        object.__setattr__(self, "segments", segs)

    def __str__(self) -> str:
        return ".".join(self.segments)

    @property
    def topic(self) -> str:
        return str(self)


def validate_keygroup_name(raw: str) -> KeygroupName:
    """Parse a dot-separated keygroup name such as ``app.tenant.data``."""
    if not isinstance(raw, str):
        raise MalformedName(f"keygroup name must be a string, got {type(raw).__name__}")
    return KeygroupName(tuple(raw.split(".")))


def as_keygroup(name: str | KeygroupName) -> KeygroupName:
    return name if isinstance(name, KeygroupName) else validate_keygroup_name(name)


@wire
@dataclass(frozen=True)
class NodeDescriptor:
    name: str
    latitude: float
    longitude: float
    machine_ids: tuple[str, ...] = ()
    public_key: bytes = b""

    def __post_init__(self) -> None:
        check_token(self.name, "node name")
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} out of range")
        object.__setattr__(self, "latitude", float(self.latitude))
        object.__setattr__(self, "longitude", float(self.longitude))
        object.__setattr__(self, "machine_ids", tuple(self.machine_ids))
        for m in self.machine_ids:
            check_token(m, "machine name")

    @property
    def id(self) -> EntityId:
        return EntityId("node", self.name)


@wire
@dataclass(frozen=True)
class MachineDescriptor:
    name: str
    node: str
    address: str
    public_key: bytes = b""

    def __post_init__(self) -> None:
        check_token(self.name, "machine name")
        check_token(self.node, "node name")

    @property
    def id(self) -> EntityId:
        return EntityId("machine", self.name)


@wire
@dataclass(frozen=True)
class ClientDescriptor:
    name: str
    public_key: bytes = b""

    def __post_init__(self) -> None:
        check_token(self.name, "client name")

    @property
    def id(self) -> EntityId:
        return EntityId("client", self.name)


@wire
@dataclass(frozen=True)
class ReplicaConfig:
    """Per-replica retention; ``ttl_ms=None`` means records never expire."""

    ttl_ms: int | None = None

    def __post_init__(self) -> None:
        if self.ttl_ms is not None and (isinstance(self.ttl_ms, bool) or self.ttl_ms < 0):
            raise ValueError(f"ttl must be >= 0 or disabled, got {self.ttl_ms}")

    @property
    def disabled(self) -> bool:
        return self.ttl_ms is None


@wire
@dataclass(frozen=True)
class SecretVersion:
    version: int
    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if self.version < 1:
            raise ValueError("secret version starts at 1")
        if len(self.key) != 16:
            raise ValueError("secret key material must be 128 bits")


@wire
@dataclass(frozen=True)
class KeygroupMetadata:
    name: KeygroupName
    version: int
    replica_nodes: Mapping[str, ReplicaConfig]
    trigger_nodes: frozenset[str]
    authorized_clients: frozenset[str]
    secret: SecretVersion

    def __post_init__(self) -> None:
        object.__setattr__(self, "replica_nodes", _frozen_map(self.replica_nodes))
        object.__setattr__(self, "trigger_nodes", frozenset(self.trigger_nodes))
        object.__setattr__(self, "authorized_clients", frozenset(self.authorized_clients))
        if self.version < 1:
            raise ValueError("keygroup version starts at 1")

    @property
    def members(self) -> frozenset[str]:
        return frozenset(self.replica_nodes) | self.trigger_nodes

    def is_replica(self, node: str) -> bool:
        return node in self.replica_nodes

    def is_trigger(self, node: str) -> bool:
        return node in self.trigger_nodes

    def ttl_of(self, node: str) -> int | None:
        cfg = self.replica_nodes.get(node)
        return None if cfg is None else cfg.ttl_ms

    def without_secret(self) -> KeygroupMetadata:
        return KeygroupMetadata(
            self.name, self.version, self.replica_nodes, self.trigger_nodes,
            self.authorized_clients, SecretVersion(self.secret.version, bytes(16)),
        )


@wire
@dataclass(frozen=True)
class DataRecord:
    keygroup: KeygroupName
    key: str
    fields: Mapping[str, bytes]
    timestamp: int
    writer: str
    deleted: bool = False

    def __post_init__(self) -> None:
        check_token(self.key, "record key")
        check_token(self.writer, "writer")
        fields = _frozen_map(self.fields)
        for name, value in fields.items():
            if not isinstance(name, str) or not name:
                raise ValueError(f"field names must be nonempty strings, got {name!r}")
            if not isinstance(value, bytes):
                raise ValueError(f"field {name!r} must hold bytes")
        if self.deleted and fields:
            raise ValueError("a tombstone carries no fields")
        object.__setattr__(self, "fields", fields)

    @property
    def ident(self) -> tuple[KeygroupName, str]:
        return (self.keygroup, self.key)

    def order_key(self) -> tuple[int, str, bytes]:
        return (self.timestamp, self.writer, encode(self))


def tombstone(keygroup: KeygroupName, key: str, timestamp: int, writer: str) -> DataRecord:
    return DataRecord(keygroup, key, {}, timestamp, writer, deleted=True)


@wire
@dataclass(frozen=True)
class UpdateMessage:
    sender_node: str
    keygroup: KeygroupName
    counter: int
    payload: bytes
    secret_version: int

    def __post_init__(self) -> None:
        if self.counter < 1:
            raise ValueError("counters start at 1")


@wire
@dataclass(frozen=True)
class CounterBeacon:
    """Periodic advertisement of a sender's latest counter on a keygroup topic.

    Lets receivers notice losses at the tail of a stream, where no later
    update would reveal the gap.
    """

    sender_node: str
    keygroup: KeygroupName
    latest_counter: int


def merge_record(current: DataRecord | None, incoming: DataRecord) -> DataRecord:
    """Last-writer-wins on ``(timestamp, writer)``.

    Equal pairs with differing content fall back to comparing canonical bytes,
    which keeps the merge a total-order maximum (commutative, associative and
    idempotent) even when a misconfigured keygroup has two writers.
    """
    if current is None:
        return incoming
    if current.ident != incoming.ident:
        raise KeyMismatch(f"cannot merge {current.ident} with {incoming.ident}")
    if (incoming.timestamp, incoming.writer) != (current.timestamp, current.writer):
        if (incoming.timestamp, incoming.writer) > (current.timestamp, current.writer):
            return incoming
        return current
    if incoming == current:
        return current
    return incoming if encode(incoming) > encode(current) else current


def merge_all(records: Iterable[DataRecord]) -> DataRecord | None:
    result = None
    for r in records:
        result = merge_record(result, r)
    return result
