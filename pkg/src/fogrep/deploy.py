"""Run a whole cluster in one process on localhost sockets.

Used by the socket demo script and the command-line tests: every machine
listens on its own TCP port, storage is file-backed, and client identity
files are written next to the data so ``fogctl`` can connect.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .crypto import SystemEntropy, generate_keypair
from .daemon import DaemonConfig, Machine
from .identity import Identity
from .model import ClientDescriptor, EntityId, MachineDescriptor, NodeDescriptor, as_keygroup
from .naming import AddClient, AddReplica, AddTrigger, FileJournal, NamingService
from .netbus import RealClock, SocketBus
from .storage import FileConnector


@dataclass
class Deployment:
    root: Path
    clock: RealClock
    bus: SocketBus
    naming: NamingService
    machines: dict[str, list[Machine]] = field(default_factory=dict)
    identity_files: dict[str, Path] = field(default_factory=dict)
    keygroups: list[str] = field(default_factory=list)

    def endpoint(self, node: str, index: int = 0) -> str:
        host, port = self.bus.address(self.machines[node][index].endpoint)
        return f"{host}:{port}"

    def wait_joined(self, timeout_s: float = 10.0) -> bool:
        def pending() -> bool:
            with self.clock.lock:
                metas = [self.naming.keygroup(kg) for kg in self.keygroups]
                return any(
                    not m.joined(meta.name)
                    for meta in metas for node in meta.members
                    for m in self.machines.get(node, ())
                )
        return self.clock.run_while(pending, self.clock.time() + timeout_s * 1000)

    def close(self) -> None:
        with self.clock.lock:
            for ms in self.machines.values():
                for m in ms:
                    m.stop()
                    m.storage.close()
        self.bus.close()


def start_local(
    root: str | Path,
    nodes: dict[str, int],
    keygroups: list[tuple[str, list[tuple[str, int | None]], list[str], list[str]]],
    clients: list[str],
    config: DaemonConfig | None = None,
) -> Deployment:
    """``nodes`` maps node name to machine count; each keygroup is
    ``(name, [(replica, ttl_ms)], [trigger nodes], [clients])``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    clock = RealClock()
    bus = SocketBus(clock)
    config = config or DaemonConfig(config_refresh_ms=1000.0)
    naming = NamingService(generate_keypair(), SystemEntropy(),
                           FileJournal(root / "naming.journal"), clock)
    bus.register(naming.endpoint)
    bus.serve(naming.endpoint, naming.handle_frame)
    dep = Deployment(root, clock, bus, naming)

    operator = Identity(EntityId("client", "operator"), generate_keypair())
    node_ids = {n: Identity(EntityId("node", n), generate_keypair()) for n in nodes}
    names = list(nodes)
    with clock.lock:
        naming.bootstrap(NodeDescriptor(names[0], 0.0, 0.0, (), node_ids[names[0]].public),
                         ClientDescriptor("operator", operator.public))
        for i, n in enumerate(names[1:], 1):
            naming.call(operator, "register", NodeDescriptor(n, 0.0, float(i), (), node_ids[n].public))
        idents = {"operator": operator}
        for c in clients:
            idents[c] = Identity(EntityId("client", c), generate_keypair())
            naming.call(operator, "register", ClientDescriptor(c, idents[c].public))
        for c, ident in idents.items():
            path = root / f"{c}.identity"
            path.write_bytes(ident.to_file(naming.public))
            dep.identity_files[c] = path
        for n, count in nodes.items():
            storage = FileConnector(root / n)
            dep.machines[n] = []
            for i in range(count):
                mname = f"{n}-m{i}"
                naming.call(operator, "register",
                            MachineDescriptor(mname, n, f"{n}/{mname}", node_ids[n].public))
                ident = Identity(EntityId("node", n), node_ids[n].keypair)
                dep.machines[n].append(Machine(mname, n, ident, storage, bus, clock,
                                               naming.public, naming.endpoint, config))
        for name, replicas, triggers, kg_clients in keygroups:
            kg = as_keygroup(name)
            dep.keygroups.append(str(kg))
            owner = idents[kg_clients[0]]
            naming.call(owner, "create_keygroup", kg, replicas[0][0], replicas[0][1])
            for node, ttl in replicas[1:]:
                naming.call(owner, "update_keygroup", kg, AddReplica(node, ttl))
            for node in triggers:
                naming.call(owner, "update_keygroup", kg, AddTrigger(node))
            for c in kg_clients[1:]:
                naming.call(owner, "update_keygroup", kg, AddClient(c))
        for ms in dep.machines.values():
            for m in ms:
                m.start()
    return dep
