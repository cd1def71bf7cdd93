"""Declarative cluster description and its text format.

One stanza per line; ``#`` starts a comment::

    seed 7
    timescale 86400
    node edge lat=52.5 lon=13.4 machines=2 connector=memory
    node cloud lat=50.1 lon=8.7
    client app
    keygroup app.temps replicas=edge:1d,cloud:disabled triggers=agg clients=app
    faults drop=0.2 reorder=0.1 delay=1ms..5ms reorder-extra=30ms
    partition edge|cloud from=1s to=3s
    daemon buffer=64 refresh=5s
    scenario research-station readings=60 period=100ms

Durations take the units ``us ms s m h d``. Keygroup TTLs are written in
real-world time and divided by ``timescale``; every other duration is
virtual simulation time. Partition windows count from the moment the
cluster has finished building.
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field, replace

from ..daemon import DaemonConfig
from ..errors import FogError, SpecInvalid
from ..model import check_token, validate_keygroup_name
from ..transport import FaultProfile, Partition

UNITS = {"us": 0.001, "ms": 1.0, "s": 1000.0, "m": 60_000.0, "h": 3_600_000.0, "d": 86_400_000.0}
_DURATION = re.compile(r"^(\d+(?:\.\d+)?)(us|ms|s|m|h|d)$")


def parse_duration(text: str) -> float:
    m = _DURATION.match(text.strip())
    if not m:
        raise SpecInvalid(f"bad duration {text!r}")
    return float(m.group(1)) * UNITS[m.group(2)]


@dataclass(frozen=True)
class NodeSpec:
    name: str
    latitude: float = 0.0
    longitude: float = 0.0
    machines: int = 1
    connector: str = "memory"


@dataclass(frozen=True)
class KeygroupSpec:
    name: str
    replicas: tuple[tuple[str, int | None], ...]
    triggers: tuple[str, ...] = ()
    clients: tuple[str, ...] = ()


@dataclass
class ClusterSpec:
    nodes: list[NodeSpec] = field(default_factory=list)
    keygroups: list[KeygroupSpec] = field(default_factory=list)
    clients: list[str] = field(default_factory=list)
    faults: FaultProfile = field(default_factory=FaultProfile)
    seed: int = 0
    timescale: float = 1.0
    daemon: DaemonConfig = field(default_factory=DaemonConfig)
    key_seed: str = "fogrep"
    scenario: str | None = None
    params: dict[str, str] = field(default_factory=dict)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise SpecInvalid(f"no node {name!r} in spec")

    def validate(self) -> ClusterSpec:
        try:
            names = [n.name for n in self.nodes]
            if not names:
                raise SpecInvalid("spec declares no nodes")
            if len(set(names)) != len(names):
                raise SpecInvalid("duplicate node name")
            for n in self.nodes:
                check_token(n.name)
                if n.machines < 1:
                    raise SpecInvalid(f"node {n.name} needs at least one machine")
                if n.connector not in ("memory", "file"):
                    raise SpecInvalid(f"unknown connector {n.connector!r}")
                if not (-90 <= n.latitude <= 90 and -180 <= n.longitude <= 180):
                    raise SpecInvalid(f"node {n.name} location out of range")
            for c in self.clients:
                check_token(c)
            if len(set(self.clients)) != len(self.clients):
                raise SpecInvalid("duplicate client name")
            seen = set()
            for kg in self.keygroups:
                validate_keygroup_name(kg.name)
                if kg.name in seen:
                    raise SpecInvalid(f"duplicate keygroup {kg.name}")
                seen.add(kg.name)
                if not kg.replicas:
                    raise SpecInvalid(f"keygroup {kg.name} has no replica node")
                for node in [r for r, _ in kg.replicas] + list(kg.triggers):
                    if node not in names:
                        raise SpecInvalid(f"keygroup {kg.name} names unknown node {node!r}")
                if not kg.clients:
                    raise SpecInvalid(f"keygroup {kg.name} has no client")
                for c in kg.clients:
                    if c not in self.clients:
                        raise SpecInvalid(f"keygroup {kg.name} names unknown client {c!r}")
        except SpecInvalid:
            raise
        except (FogError, ValueError) as exc:
            raise SpecInvalid(str(exc)) from exc
        return self


def _kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for t in tokens:
        if "=" not in t:
            raise SpecInvalid(f"line {lineno}: expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = v
    return out


def _ttl(text: str, timescale: float) -> int | None:
    if text in ("disabled", "none", "inf"):
        return None
    return max(1, round(parse_duration(text) / timescale))


_DAEMON_KEYS = {
    "buffer": ("buffer_capacity", int),
    "heartbeat": ("heartbeat_period_ms", parse_duration),
    "membership-timeout": ("membership_timeout_ms", parse_duration),
    "refresh": ("config_refresh_ms", parse_duration),
    "beacon": ("beacon_period_ms", parse_duration),
    "grace": ("gap_grace_ms", parse_duration),
    "request-timeout": ("request_timeout_ms", parse_duration),
    "sync-source": ("sync_source", str),
}


def parse_spec(text: str) -> ClusterSpec:
    spec = ClusterSpec()
    fault_kw: dict = {}
    partitions: list[Partition] = []
    pending_kgs: list[tuple[int, dict[str, str], str]] = []
    daemon_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            head, *rest = shlex.split(line)
        except ValueError as exc:
            raise SpecInvalid(f"line {lineno}: {exc}") from exc
        try:
            if head == "seed":
                spec.seed = int(rest[0])
            elif head == "timescale":
                spec.timescale = float(rest[0])
                if spec.timescale <= 0:
                    raise SpecInvalid("timescale must be positive")
            elif head == "key-seed":
                spec.key_seed = rest[0]
            elif head == "node":
                kv = _kv(rest[1:], lineno)
                spec.nodes.append(NodeSpec(
                    rest[0], float(kv.get("lat", 0)), float(kv.get("lon", 0)),
                    int(kv.get("machines", 1)), kv.get("connector", "memory"),
                ))
            elif head == "client":
                spec.clients.extend(rest)
            elif head == "keygroup":
                pending_kgs.append((lineno, _kv(rest[1:], lineno), rest[0]))
            elif head == "faults":
                kv = _kv(rest, lineno)
                if "drop" in kv:
                    fault_kw["drop_probability"] = float(kv["drop"])
                if "reorder" in kv:
                    fault_kw["reorder_probability"] = float(kv["reorder"])
                if "delay" in kv:
                    lo, _, hi = kv["delay"].partition("..")
                    fault_kw["delay_ms"] = (parse_duration(lo), parse_duration(hi or lo))
                if "reorder-extra" in kv:
                    fault_kw["reorder_extra_ms"] = parse_duration(kv["reorder-extra"])
            elif head == "partition":
                a, _, b = rest[0].partition("|")
                kv = _kv(rest[1:], lineno)
                partitions.append(Partition(
                    frozenset(a.split(",")), frozenset(b.split(",")),
                    parse_duration(kv["from"]), parse_duration(kv["to"]),
                ))
            elif head == "scenario":
                spec.scenario = rest[0]
                spec.params = _kv(rest[1:], lineno)
            elif head == "daemon":
                for k, v in _kv(rest, lineno).items():
                    if k not in _DAEMON_KEYS:
                        raise SpecInvalid(f"unknown daemon setting {k!r}")
                    attr, conv = _DAEMON_KEYS[k]
                    daemon_kw[attr] = conv(v)
            else:
                raise SpecInvalid(f"unknown stanza {head!r}")
        except SpecInvalid as exc:
            if str(exc).startswith("line "):
                raise
            raise SpecInvalid(f"line {lineno}: {exc}") from exc
        except (IndexError, KeyError, ValueError) as exc:
            raise SpecInvalid(f"line {lineno}: malformed {head} stanza ({exc})") from exc
    # keygroups last so the timescale applies wherever it is declared
    for lineno, kv, name in pending_kgs:
        try:
            replicas = []
            for item in kv.get("replicas", "").split(","):
                if not item:
                    continue
                node, _, ttl = item.partition(":")
                replicas.append((node, _ttl(ttl or "disabled", spec.timescale)))
            spec.keygroups.append(KeygroupSpec(
                name, tuple(replicas),
                tuple(t for t in kv.get("triggers", "").split(",") if t),
                tuple(c for c in kv.get("clients", "").split(",") if c),
            ))
        except SpecInvalid as exc:
            raise SpecInvalid(f"line {lineno}: {exc}") from exc
    try:
        spec.faults = FaultProfile(partitions=tuple(partitions), rng_seed=spec.seed, **fault_kw)
    except ValueError as exc:
        raise SpecInvalid(f"faults: {exc}") from exc
    spec.daemon = replace(DaemonConfig(), **daemon_kw)
    return spec.validate()


def dump_spec(spec: ClusterSpec) -> str:
    """Render a spec back to text (TTLs in virtual milliseconds)."""
    lines = [f"seed {spec.seed}", f"key-seed {spec.key_seed}"]
    for n in spec.nodes:
        lines.append(f"node {n.name} lat={n.latitude} lon={n.longitude} "
                     f"machines={n.machines} connector={n.connector}")
    if spec.clients:
        lines.append("client " + " ".join(spec.clients))
    for kg in spec.keygroups:
        reps = ",".join(f"{n}:{'disabled' if t is None else f'{t}ms'}" for n, t in kg.replicas)
        parts = [f"keygroup {kg.name} replicas={reps}"]
        if kg.triggers:
            parts.append("triggers=" + ",".join(kg.triggers))
        parts.append("clients=" + ",".join(kg.clients))
        lines.append(" ".join(parts))
    f = spec.faults
    lines.append(f"faults drop={f.drop_probability} reorder={f.reorder_probability} "
                 f"delay={f.delay_ms[0]}ms..{f.delay_ms[1]}ms reorder-extra={f.reorder_extra_ms}ms")
    for p in f.partitions:
        lines.append(f"partition {','.join(sorted(p.side_a))}|{','.join(sorted(p.side_b))} "
                     f"from={p.start}ms to={p.end}ms")
    defaults = DaemonConfig()
    tweaks = []
    for key, (attr, _) in _DAEMON_KEYS.items():
        value = getattr(spec.daemon, attr)
        if value != getattr(defaults, attr):
            tweaks.append(f"{key}={value}ms" if isinstance(value, float) else f"{key}={value}")
    if tweaks:
        lines.append("daemon " + " ".join(tweaks))
    if spec.scenario:
        lines.append(" ".join([f"scenario {spec.scenario}",
                               *(f"{k}={v}" for k, v in sorted(spec.params.items()))]))
    return "\n".join(lines) + "\n"


__all__ = [
    "ClusterSpec", "KeygroupSpec", "NodeSpec", "dump_spec", "parse_duration", "parse_spec",
]
