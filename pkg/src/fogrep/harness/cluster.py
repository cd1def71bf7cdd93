"""Whole fog topologies in one process on virtual time."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..client import ClientSession, LocalChannel
from ..crypto import SeededEntropy, seeded_keypair
from ..daemon import Machine
from ..errors import SpecInvalid
from ..identity import Identity
from ..model import (
    ClientDescriptor,
    DataRecord,
    EntityId,
    KeygroupName,
    MachineDescriptor,
    NodeDescriptor,
    as_keygroup,
)
from ..naming import AddClient, AddReplica, AddTrigger, NamingService
from ..storage import StorageConnector, make_connector
from ..transport import EventLoop, SimBus
from .spec import ClusterSpec

OPERATOR = "operator"
BUILD_DEADLINE_MS = 60_000.0


@dataclass
class Cluster:
    spec: ClusterSpec
    loop: EventLoop
    bus: SimBus
    naming: NamingService
    machines: dict[str, list[Machine]]
    storages: dict[str, StorageConnector]
    clients: dict[str, Identity]
    node_identities: dict[str, Identity]
    workdir: Path | None = None
    crashed: set[str] = field(default_factory=set)
    ready_at: float = 0.0

    # -- lookup
    def machine(self, node: str, index: int = 0) -> Machine:
        return self.machines[node][index]

    def live(self, node: str) -> list[Machine]:
        return [m for m in self.machines[node] if m.running]

    def any_machine(self, node: str) -> Machine:
        live = self.live(node)
        if not live:
            raise SpecInvalid(f"node {node} has no live machine")
        return live[0]

    def all_machines(self) -> list[Machine]:
        return [m for node in sorted(self.machines) for m in self.machines[node]]

    def now(self) -> float:
        return self.loop.time()

    # -- driving time
    def run_for(self, ms: float) -> None:
        self.loop.run_for(ms)

    def run_until(self, t: float) -> None:
        self.loop.run_until(t)

    def settle(self, deadline_ms: float = 60_000.0, step_ms: float = 50.0,
               quiet_ms: float | None = None) -> bool:
        """Run until no live machine has pending gaps or an unfinished join,
        and that has stayed true for ``quiet_ms`` (long enough for counter
        beacons to expose lost tail messages).

        Returns False if the deadline passed first.
        """
        if quiet_ms is None:
            cfg = self.spec.daemon
            quiet_ms = 10 * cfg.beacon_period_ms + cfg.request_timeout_ms
        end = self.now() + deadline_ms
        idle_since = None
        while self.now() < end:
            self.loop.run_for(step_ms)
            if self.busy():
                idle_since = None
            elif idle_since is None:
                idle_since = self.now()
            elif self.now() - idle_since >= quiet_ms:
                return True
        return not self.busy()

    def busy(self) -> bool:
        for m in self.all_machines():
            if not m.running:
                continue
            for meta in m.cached_keygroups():
                if m.node in meta.members and not m.joined(meta.name):
                    return True
        for node in self.machines:
            live = self.live(node)
            if not live:
                continue
            for cur in live[0].loss_accounting().values():
                if cur.pending:
                    return True
        return False

    def sync_config(self, deadline_ms: float = 5_000.0) -> None:
        """Push current naming state to every node and wait for joins."""
        for node in sorted(self.machines):
            for m in self.live(node):
                m.config_refresh()
        self.loop.run_for(1.0)
        self.settle(deadline_ms)

    # -- faults
    def crash(self, node: str, index: int) -> None:
        m = self.machines[node][index]
        m.stop()
        self.bus.set_down(m.endpoint)
        self.crashed.add(m.endpoint)

    # -- sessions
    def session(self, client: str, node: str, index: int = 0) -> ClientSession:
        """Signed client session bound in-process to one machine."""
        machine = self.machines[node][index]
        return ClientSession(
            self.clients[client], self.naming.public, LocalChannel(machine, self.loop)
        )

    # -- observation
    def replica_maps(self, kg: str | KeygroupName, include_tombstones: bool = True) -> dict[str, dict[str, DataRecord]]:
        kg = as_keygroup(kg)
        meta = self.naming.keygroup(kg)
        out = {}
        for node in sorted(meta.replica_nodes):
            st = self.storages[node]
            snap = st.snapshot(kg, self.now()) if st.has_keygroup(kg) else {}
            if not include_tombstones:
                snap = {k: r for k, r in snap.items() if not r.deleted}
            out[node] = snap
        return out

    def loss_report(self) -> list[tuple[str, str, str, int, int, int]]:
        """(receiver, sender, keygroup, applied, pending, lost) per stream."""
        rows = []
        for node in sorted(self.machines):
            cursors = self.machines[node][0].loss_accounting()
            for (sender, kg), cur in sorted(cursors.items()):
                rows.append((node, sender, kg, cur.applied, len(cur.pending), len(cur.lost)))
        return rows

    def close(self) -> None:
        for m in self.all_machines():
            m.stop()
        for st in self.storages.values():
            st.close()


def build_cluster(spec: ClusterSpec, workdir: str | Path | None = None) -> Cluster:
    """Bootstrap naming, register everything, create keygroups and wait
    until every node has joined every keygroup it belongs to."""
    spec.validate()
    loop = EventLoop()
    bus = SimBus(loop, spec.faults)
    bus.faults_enabled = False
    seed = spec.seed

    naming = NamingService(
        seeded_keypair(f"{spec.key_seed}/naming"),
        SeededEntropy(f"{seed}/naming", "secrets"),
        clock=loop,
    )
    bus.register(naming.endpoint)
    bus.serve(naming.endpoint, naming.handle_frame)

    operator = Identity.simulated("client", OPERATOR, spec.key_seed, seed)
    node_ids = {n.name: Identity.simulated("node", n.name, spec.key_seed, seed) for n in spec.nodes}
    first = spec.nodes[0]
    naming.bootstrap(
        NodeDescriptor(first.name, first.latitude, first.longitude, (), node_ids[first.name].public),
        ClientDescriptor(OPERATOR, operator.public),
    )
    for n in spec.nodes[1:]:
        naming.call(operator, "register",
                    NodeDescriptor(n.name, n.latitude, n.longitude, (), node_ids[n.name].public))
    clients = {OPERATOR: operator}
    for c in spec.clients:
        if c == OPERATOR:
            continue
        clients[c] = Identity.simulated("client", c, spec.key_seed, seed)
        naming.call(operator, "register", ClientDescriptor(c, clients[c].public))

    needs_dir = any(n.connector == "file" for n in spec.nodes)
    root = Path(workdir) if workdir else (Path(tempfile.mkdtemp(prefix="fogsim-")) if needs_dir else None)
    storages: dict[str, StorageConnector] = {}
    machines: dict[str, list[Machine]] = {}
    for n in spec.nodes:
        storages[n.name] = make_connector(n.connector, root / n.name if n.connector == "file" else None)
        machines[n.name] = []
        for i in range(n.machines):
            mname = f"{n.name}-m{i}"
            endpoint = f"{n.name}/{mname}"
            naming.call(operator, "register",
                        MachineDescriptor(mname, n.name, endpoint, node_ids[n.name].public))
            ident = Identity(
                EntityId("node", n.name), node_ids[n.name].keypair,
                SeededEntropy(f"{seed}/machine/{mname}", "nonces"),
            )
            machines[n.name].append(Machine(
                mname, n.name, ident, storages[n.name], bus, loop, naming.public,
                naming.endpoint, spec.daemon,
            ))

    for kg in spec.keygroups:
        owner = clients[kg.clients[0]]
        name = as_keygroup(kg.name)
        first_node, first_ttl = kg.replicas[0]
        naming.call(owner, "create_keygroup", name, first_node, first_ttl)
        for node, ttl in kg.replicas[1:]:
            naming.call(owner, "update_keygroup", name, AddReplica(node, ttl))
        for node in kg.triggers:
            naming.call(owner, "update_keygroup", name, AddTrigger(node))
        for c in kg.clients[1:]:
            naming.call(owner, "update_keygroup", name, AddClient(c))

    cluster = Cluster(spec, loop, bus, naming, machines, storages, clients, node_ids, root)
    for m in cluster.all_machines():
        m.start()
    loop.run_for(1.0)
    if not cluster.settle(BUILD_DEADLINE_MS):
        raise SpecInvalid("cluster did not finish joining its keygroups")
    _verify_subscriptions(cluster)
    cluster.ready_at = loop.time()
    faults = spec.faults
    bus.set_profile(replace(faults, partitions=tuple(
        replace(p, start=p.start + cluster.ready_at, end=p.end + cluster.ready_at)
        for p in faults.partitions
    )))
    bus.faults_enabled = True
    return cluster


def _verify_subscriptions(cluster: Cluster) -> None:
    """Every member node listens to every machine of every remote replica,
    through exactly one responsible machine."""
    for kg in cluster.spec.keygroups:
        meta = cluster.naming.keygroup(kg.name)
        for node in sorted(meta.members):
            held: dict[tuple[str, str], int] = {}
            for m in cluster.live(node):
                for sub in m.subscriptions():
                    held[sub] = held.get(sub, 0) + 1
            for sender in sorted(meta.replica_nodes):
                if sender == node:
                    continue
                for m in cluster.machines[sender]:
                    if held.get((kg.name, m.endpoint)) != 1:
                        raise SpecInvalid(
                            f"{node} is not subscribed exactly once to {m.endpoint} for {kg.name}"
                        )
