"""Canonical, self-describing, length-prefixed binary encoding.

Layout: one format byte (``FORMAT_VERSION``) followed by a single value.
Each value starts with a one-byte tag:

    N            None
    T / F        True / False
    i  u32 n     signed big-endian integer of n bytes
    f            IEEE-754 double, big-endian
    b  u32 n     raw bytes
    s  u32 n     UTF-8 text
    l  u32 n     sequence of n values (decodes to tuple)
    S  u32 n     set of n values, sorted by encoded bytes (decodes to frozenset)
    m  u32 n     n key/value pairs, sorted by encoded key (decodes to dict)
    o  s u32 n   registered dataclass: type name, then n field values in
                 declaration order

Sorting sets and maps by their encoded bytes makes the output independent of
insertion order, so equal values always produce identical bytes.
"""

from __future__ import annotations

import dataclasses
import struct
from collections.abc import Mapping
from typing import Any, TypeVar

from .errors import DecodeError, FogError

FORMAT_VERSION = 1
MAX_DEPTH = 64

_REGISTRY: dict[str, type] = {}
_NAMES: dict[type, str] = {}

T = TypeVar("T")


def wire(cls: type[T]) -> type[T]:
    """Register a dataclass so it can be encoded and decoded by name."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    name = cls.__name__
    if name in _REGISTRY and _REGISTRY[name] is not cls:
        raise TypeError(f"duplicate wire type name {name}")
    _REGISTRY[name] = cls
    _NAMES[cls] = name
    return cls


def _u32(n: int) -> bytes:
    return struct.pack(">I", n)


def _encode_value(value: Any, out: bytearray, depth: int = 0) -> None:
    if depth > MAX_DEPTH:
        raise ValueError("value nested too deeply")
    if value is None:
        out += b"N"
    elif value is True:
        out += b"T"
    elif value is False:
        out += b"F"
    elif isinstance(value, int):
        raw = value.to_bytes((value.bit_length() + 8) // 8 or 1, "big", signed=True)
        out += b"i" + _u32(len(raw)) + raw
    elif isinstance(value, float):
        out += b"f" + struct.pack(">d", value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out += b"b" + _u32(len(raw)) + raw
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += b"s" + _u32(len(raw)) + raw
    elif type(value) in _NAMES:
        name = _NAMES[type(value)].encode("utf-8")
        fields = dataclasses.fields(value)
        out += b"o" + _u32(len(name)) + name + _u32(len(fields))
        for f in fields:
            _encode_value(getattr(value, f.name), out, depth + 1)
    elif isinstance(value, (list, tuple)):
        out += b"l" + _u32(len(value))
        for item in value:
            _encode_value(item, out, depth + 1)
    elif isinstance(value, (set, frozenset)):
        items = sorted(_encode_item(v, depth + 1) for v in value)
        out += b"S" + _u32(len(items))
        for raw in items:
            out += raw
    elif isinstance(value, Mapping):
        pairs = sorted(
            (_encode_item(k, depth + 1), _encode_item(v, depth + 1)) for k, v in value.items()
        )
        out += b"m" + _u32(len(pairs))
        for k, v in pairs:
            out += k + v
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def _encode_item(value: Any, depth: int) -> bytes:
    buf = bytearray()
    _encode_value(value, buf, depth)
    return bytes(buf)


def encode(value: Any) -> bytes:
    out = bytearray([FORMAT_VERSION])
    _encode_value(value, out)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError("truncated input")
        raw = bytes(self.data[self.pos:end])
        self.pos = end
        return raw

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def value(self, depth: int = 0) -> Any:
        if depth > MAX_DEPTH:
            raise DecodeError("value nested too deeply")
        tag = self.take(1)
        if tag == b"N":
            return None
        if tag == b"T":
            return True
        if tag == b"F":
            return False
        if tag == b"i":
            n = self.u32()
            if n == 0:
                raise DecodeError("empty integer")
            return int.from_bytes(self.take(n), "big", signed=True)
        if tag == b"f":
            return struct.unpack(">d", self.take(8))[0]
        if tag == b"b":
            return self.take(self.u32())
        if tag == b"s":
            try:
                return self.take(self.u32()).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DecodeError("invalid utf-8") from exc
        if tag == b"l":
            return tuple(self.value(depth + 1) for _ in range(self._count()))
        if tag == b"S":
            items = [self.value(depth + 1) for _ in range(self._count())]
            try:
                result = frozenset(items)
            except TypeError as exc:
                raise DecodeError("unhashable set member") from exc
            if len(result) != len(items):
                raise DecodeError("duplicate set member")
            return result
        if tag == b"m":
            result: dict[Any, Any] = {}
            for _ in range(self._count()):
                k = self.value(depth + 1)
                try:
                    if k in result:
                        raise DecodeError("duplicate map key")
                    result[k] = self.value(depth + 1)
                except TypeError as exc:
                    raise DecodeError("unhashable map key") from exc
            return result
        if tag == b"o":
            try:
                name = self.take(self.u32()).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DecodeError("invalid type name") from exc
            cls = _REGISTRY.get(name)
            if cls is None:
                raise DecodeError(f"unknown wire type {name!r}")
            n = self.u32()
            fields = dataclasses.fields(cls)
            if n != len(fields):
                raise DecodeError(f"{name}: expected {len(fields)} fields, got {n}")
            args = [self.value(depth + 1) for _ in range(n)]
            try:
                return cls(*args)
            except (TypeError, ValueError, FogError) as exc:
                raise DecodeError(f"invalid {name}: {exc}") from exc
        raise DecodeError(f"unknown tag {tag!r}")

    def _count(self) -> int:
        n = self.u32()
        # every element needs at least one byte
        if n > len(self.data) - self.pos:
            raise DecodeError("truncated input")
        return n


def decode(data: bytes, expect: type | None = None) -> Any:
    """Decode bytes produced by :func:`encode`.

    Raises DecodeError on truncation, trailing garbage, unknown tags, or a
    decoded value that fails its own invariants.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise DecodeError("expected bytes")
    if len(data) < 1:
        raise DecodeError("empty input")
    if data[0] != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {data[0]}")
    reader = _Reader(bytes(data))
    reader.pos = 1
    value = reader.value()
    if reader.pos != len(reader.data):
        raise DecodeError("trailing bytes after value")
    if expect is not None and not isinstance(value, expect):
        raise DecodeError(f"expected {expect.__name__}, got {type(value).__name__}")
    return value
