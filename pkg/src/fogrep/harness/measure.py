"""Latency and staleness statistics."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

from ..errors import InsufficientReplicas, Timeout
from ..model import KeygroupName, as_keygroup

ROWS = ("Min", "Max", "Avg", "Std Dev", "Q0.95", "Q0.99")


def nearest_rank(sorted_sample: list[float], q: float) -> float:
    if not sorted_sample:
        raise ValueError("empty sample")
    rank = max(1, math.ceil(q * len(sorted_sample)))
    return sorted_sample[rank - 1]


@dataclass(frozen=True)
class Stats:
    min: float
    max: float
    avg: float
    std: float
    q95: float
    q99: float
    n: int

    @classmethod
    def of(cls, sample: list[float]) -> Stats:
        if not sample:
            raise ValueError("cannot summarize an empty sample")
        s = sorted(sample)
        return cls(s[0], s[-1], statistics.fmean(s), statistics.pstdev(s),
                   nearest_rank(s, 0.95), nearest_rank(s, 0.99), len(s))

    def row(self, label: str) -> float:
        return {
            "Min": self.min, "Max": self.max, "Avg": self.avg,
            "Std Dev": self.std, "Q0.95": self.q95, "Q0.99": self.q99,
        }[label]


@dataclass
class StatsTable:
    """Columns of statistics in milliseconds, one column per operation."""

    title: str
    columns: dict[str, Stats]

    @classmethod
    def from_samples(cls, title: str, samples: dict[str, list[float]]) -> StatsTable:
        return cls(title, {name: Stats.of(v) for name, v in samples.items()})


def _replicas(cluster, kg: KeygroupName) -> list[str]:
    meta = cluster.naming.keygroup(kg)
    if meta is None:
        raise InsufficientReplicas(f"no keygroup {kg}")
    nodes = sorted(meta.replica_nodes)
    if len(nodes) < 2:
        raise InsufficientReplicas(f"{kg} has {len(nodes)} replica node(s), need 2")
    return nodes


def measure_staleness(cluster, kg: str | KeygroupName, n_ops: int, client: str | None = None,
                      gap_ms: float = 5.0, timeout_ms: float = 10_000.0) -> StatsTable:
    """Time from commit at the origin replica to apply at a second replica,
    both read from the one virtual clock."""
    kg = as_keygroup(kg)
    origin_node, remote_node = _replicas(cluster, kg)[:2]
    origin = cluster.any_machine(origin_node)
    remotes = cluster.live(remote_node)
    client = client or sorted(cluster.naming.keygroup(kg).authorized_clients)[0]

    commits: dict[tuple[str, bool], float] = {}
    applies: dict[tuple[str, bool], float] = {}

    def on_commit(k, record, now):
        if k == kg:
            commits[(record.key, record.deleted)] = now

    def on_apply(k, record, now):
        if k == kg:
            applies.setdefault((record.key, record.deleted), now)

    origin.on_commit.append(on_commit)
    for r in remotes:
        r.on_apply.append(on_apply)
    samples: dict[str, list[float]] = {"Put": [], "Delete": []}
    try:
        for deleted, label in ((False, "Put"), (True, "Delete")):
            for i in range(n_ops):
                key = f"staleness-{i}"
                if deleted:
                    origin.handle_delete(client, kg, key)
                else:
                    origin.handle_put(client, kg, key, {"v": str(i).encode()})
                ident = (key, deleted)
                done = cluster.loop.run_while(lambda: ident not in applies, cluster.now() + timeout_ms)
                if not done:
                    raise Timeout(f"update {key} never reached {remote_node}")
                samples[label].append(applies[ident] - commits[ident])
                cluster.run_for(gap_ms)
    finally:
        origin.on_commit.remove(on_commit)
        for r in remotes:
            r.on_apply.remove(on_apply)
    return StatsTable.from_samples("Staleness", samples)


def measure_latency_overhead(cluster, kg: str | KeygroupName, n_ops: int,
                             client: str | None = None) -> tuple[StatsTable, StatsTable]:
    """Wall-clock time of each daemon operation versus its inner storage call."""
    kg = as_keygroup(kg)
    meta = cluster.naming.keygroup(kg)
    origin = cluster.any_machine(sorted(meta.replica_nodes)[0])
    client = client or sorted(meta.authorized_clients)[0]
    e2e: dict[str, list[float]] = {"Put": [], "Read": [], "Delete": []}
    store: dict[str, list[float]] = {"Put": [], "Read": [], "Delete": []}

    def timed(label: str, fn, *args) -> None:
        t0 = time.perf_counter_ns()
        fn(*args)
        e2e[label].append((time.perf_counter_ns() - t0) / 1e6)
        store[label].append(origin.last_storage_ns / 1e6)

    payload = {"value": b"x" * 64}
    for label, fn, extra in (
        ("Put", origin.handle_put, (payload,)),
        ("Read", origin.handle_get, ()),
        ("Delete", origin.handle_delete, ()),
    ):
        for i in range(n_ops):
            timed(label, fn, client, kg, f"latency-{i}", *extra)
            # let replication traffic drain outside the timed region
            cluster.run_for(1.0)
    return (StatsTable.from_samples("Latency (daemon)", e2e),
            StatsTable.from_samples("Latency (storage only)", store))
