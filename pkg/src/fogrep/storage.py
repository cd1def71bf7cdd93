"""Node-local shared persistence behind a connector interface.

A connector is the whole shared state of one node: every machine of the node
talks to the same connector instance (or, for the file-backed connector, the
same directory). It holds three areas:

* records: keygroup -> record key -> :class:`StoredRecord`
* meta: arbitrary encodable values under tuple keys (counters, sender
  buffers, receiver cursors, cached configuration, trigger logs)
* membership: machine heartbeats used for intra-node fail-over
"""

from __future__ import annotations

import os
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .codec import decode, encode, wire
from .errors import ConnectorFailure, DecodeError, UnknownKeygroup
from .model import DataRecord, KeygroupName, merge_record


@wire
@dataclass(frozen=True)
class StoredRecord:
    record: DataRecord
    local_write_time: float


def expired(stored: StoredRecord, ttl_ms: int | None, now: float) -> bool:
    return ttl_ms is not None and now - stored.local_write_time > ttl_ms


class StorageConnector:
    """In-memory connector; also the base class for persistent ones.

    Subclasses persist by overriding :meth:`_log`; all reads are served from
    the in-memory image, which the file-backed connector rebuilds on open.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._records: dict[KeygroupName, dict[str, StoredRecord]] = {}
        self._ttl: dict[KeygroupName, int | None] = {}
        self._meta: dict[Any, Any] = {}
        self._heartbeats: dict[str, float] = {}

    @property
    def lock(self) -> threading.RLock:
        """Held across multi-step updates that must be atomic per node."""
        return self._lock

    # -- persistence hook
    def _log(self, area: str, entry: tuple) -> None:
        pass

    def close(self) -> None:
        pass

    # -- keygroups
    def register_keygroup(self, kg: KeygroupName, ttl_ms: int | None = None) -> None:
        with self._lock:
            if kg not in self._records or self._ttl.get(kg) != ttl_ms:
                self._log(str(kg), ("register", kg, ttl_ms))
            self._records.setdefault(kg, {})
            self._ttl[kg] = ttl_ms

    def set_ttl(self, kg: KeygroupName, ttl_ms: int | None) -> None:
        self.register_keygroup(kg, ttl_ms)

    def ttl(self, kg: KeygroupName) -> int | None:
        with self._lock:
            self._area(kg)
            return self._ttl.get(kg)

    def keygroups(self) -> list[KeygroupName]:
        with self._lock:
            return sorted(self._records)

    def has_keygroup(self, kg: KeygroupName) -> bool:
        with self._lock:
            return kg in self._records

    def _area(self, kg: KeygroupName) -> dict[str, StoredRecord]:
        try:
            return self._records[kg]
        except KeyError:
            raise UnknownKeygroup(f"keygroup {kg} is not stored at this node") from None

    # -- records
    def put(self, kg: KeygroupName, record: DataRecord, now: float) -> None:
        if record.keygroup != kg:
            raise ValueError(f"record belongs to {record.keygroup}, not {kg}")
        with self._lock:
            area = self._area(kg)
            stored = StoredRecord(record, float(now))
            self._log(str(kg), ("put", stored))
            area[record.key] = stored

    def merge(self, kg: KeygroupName, record: DataRecord, now: float) -> tuple[DataRecord, bool]:
        """Atomically LWW-merge ``record`` into the stored copy.

        Returns the surviving record and whether the stored state changed.
        Expired copies are treated as absent.
        """
        with self._lock:
            current = self.get_stored(kg, record.key, now)
            winner = merge_record(current.record if current else None, record)
            if current is not None and winner == current.record:
                return winner, False
            self.put(kg, winner, now)
            return winner, True

    def get_stored(self, kg: KeygroupName, key: str, now: float | None = None) -> StoredRecord | None:
        with self._lock:
            stored = self._area(kg).get(key)
            if stored is None:
                return None
            if now is not None and expired(stored, self._ttl.get(kg), now):
                return None
            return stored

    def get(self, kg: KeygroupName, key: str, now: float | None = None) -> DataRecord | None:
        stored = self.get_stored(kg, key, now)
        return None if stored is None else stored.record

    def delete_hard(self, kg: KeygroupName, key: str) -> None:
        with self._lock:
            area = self._area(kg)
            if key in area:
                self._log(str(kg), ("delete", key))
                del area[key]

    def items(self, kg: KeygroupName, now: float | None = None) -> list[StoredRecord]:
        with self._lock:
            ttl = self._ttl.get(kg)
            return [
                s for _, s in sorted(self._area(kg).items())
                if now is None or not expired(s, ttl, now)
            ]

    def snapshot(self, kg: KeygroupName, now: float | None = None) -> dict[str, DataRecord]:
        return {s.record.key: s.record for s in self.items(kg, now)}

    def sweep_expired(self, kg: KeygroupName, ttl_ms: int | None, now: float) -> list[str]:
        """Physically remove records with ``now - local_write_time > ttl``."""
        if ttl_ms is None:
            return []
        with self._lock:
            area = self._area(kg)
            gone = sorted(k for k, s in area.items() if now - s.local_write_time > ttl_ms)
            for key in gone:
                self._log(str(kg), ("delete", key))
                del area[key]
            return gone

    def compact_tombstones(self, kg: KeygroupName, horizon_ms: float, now: float) -> list[str]:
        with self._lock:
            area = self._area(kg)
            gone = sorted(
                k for k, s in area.items()
                if s.record.deleted and now - s.local_write_time > horizon_ms
            )
            for key in gone:
                self._log(str(kg), ("delete", key))
                del area[key]
            return gone

    def drop_keygroup(self, kg: KeygroupName) -> None:
        with self._lock:
            if kg in self._records:
                self._log(str(kg), ("drop",))
                del self._records[kg]
                self._ttl.pop(kg, None)

    # -- meta area
    def meta_get(self, key: tuple, default: Any = None) -> Any:
        with self._lock:
            return self._meta.get(key, default)

    def meta_put(self, key: tuple, value: Any) -> None:
        with self._lock:
            self._log("meta", ("set", key, value))
            self._meta[key] = value

    def meta_update(self, key: tuple, fn: Callable[[Any], Any], default: Any = None) -> Any:
        """Atomic read-modify-write; returns the new value."""
        with self._lock:
            value = fn(self._meta.get(key, default))
            self.meta_put(key, value)
            return value

    def meta_delete(self, key: tuple) -> None:
        with self._lock:
            if key in self._meta:
                self._log("meta", ("del", key))
                del self._meta[key]

    def meta_keys(self, prefix: tuple = ()) -> list[tuple]:
        with self._lock:
            n = len(prefix)
            return sorted(
                (k for k in self._meta if k[:n] == prefix), key=encode
            )

    # -- membership area
    def membership_heartbeat(self, machine_id: str, now: float) -> None:
        with self._lock:
            self._log("membership", ("beat", machine_id, float(now)))
            self._heartbeats[machine_id] = float(now)

    def live_machines(self, now: float, timeout: float) -> list[str]:
        with self._lock:
            return sorted(m for m, t in self._heartbeats.items() if now - t <= timeout)

    def forget_machine(self, machine_id: str) -> None:
        with self._lock:
            if machine_id in self._heartbeats:
                self._log("membership", ("forget", machine_id))
                del self._heartbeats[machine_id]


MemoryConnector = StorageConnector


class FileConnector(StorageConnector):
    """Journal-per-area persistence in one directory.

    Layout::

        <root>/<keygroup>/journal
        <root>/meta/journal
        <root>/membership/journal

    Each journal is a sequence of frames (4-byte big-endian length + canonical
    encoding). A torn final frame from a crash is ignored on replay. Writes
    are flushed before the call returns; ``fsync=True`` also forces them to
    disk.
    """

    def __init__(self, root: str | os.PathLike, fsync: bool = False) -> None:
        super().__init__()
        self.root = Path(root)
        self.fsync = fsync
        self._files: dict[str, Any] = {}
        self._replaying = False
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            self._replay()
        except OSError as exc:
            raise ConnectorFailure(f"cannot open {self.root}: {exc}") from exc

    def _journal_path(self, area: str) -> Path:
        return self.root / area / "journal"

    def _replay(self) -> None:
        self._replaying = True
        try:
            areas = sorted(p.name for p in self.root.iterdir() if p.is_dir())
            # keygroups first so meta never refers to a missing area
            for area in [a for a in areas if a not in ("meta", "membership")] + ["meta", "membership"]:
                path = self._journal_path(area)
                if not path.exists():
                    continue
                entries, good = _read_frames(path)
                for entry in entries:
                    self._apply(area, entry)
                if good < path.stat().st_size:
                    # drop a torn tail so later appends stay readable
                    with open(path, "r+b") as fh:
                        fh.truncate(good)
        finally:
            self._replaying = False

    def _apply(self, area: str, entry: tuple) -> None:
        op = entry[0]
        if area == "meta":
            if op == "set":
                self._meta[entry[1]] = entry[2]
            else:
                self._meta.pop(entry[1], None)
        elif area == "membership":
            if op == "beat":
                self._heartbeats[entry[1]] = entry[2]
            else:
                self._heartbeats.pop(entry[1], None)
        else:
            if op == "register":
                self._records.setdefault(entry[1], {})
                self._ttl[entry[1]] = entry[2]
                return
            kg = next((k for k in self._records if str(k) == area), None)
            if kg is None:
                return
            if op == "put":
                self._records[kg][entry[1].record.key] = entry[1]
            elif op == "delete":
                self._records[kg].pop(entry[1], None)
            elif op == "drop":
                del self._records[kg]
                self._ttl.pop(kg, None)

    def _log(self, area: str, entry: tuple) -> None:
        if self._replaying:
            return
        fh = self._files.get(area)
        try:
            if fh is None:
                path = self._journal_path(area)
                path.parent.mkdir(parents=True, exist_ok=True)
                fh = self._files[area] = open(path, "ab")
            frame = encode(entry)
            fh.write(struct.pack(">I", len(frame)) + frame)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        except OSError as exc:
            raise ConnectorFailure(f"journal write failed: {exc}") from exc

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files.clear()


def _read_frames(path: Path) -> tuple[list[tuple], int]:
    """Decoded frames plus the byte length of the intact prefix."""
    data = path.read_bytes()
    entries = []
    pos = 0
    while pos + 4 <= len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        if pos + 4 + n > len(data):
            break  # torn tail
        try:
            entries.append(decode(data[pos + 4:pos + 4 + n], tuple))
        except DecodeError:
            break
        pos += 4 + n
    return entries, pos


def make_connector(kind: str, root: str | os.PathLike | None = None) -> StorageConnector:
    if kind == "memory":
        return MemoryConnector()
    if kind == "file":
        if root is None:
            raise ValueError("file connector needs a root directory")
        return FileConnector(root)
    raise ValueError(f"unknown connector kind {kind!r}")
