"""Shared fixtures-as-functions for the test modules."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from fogrep.codec import encode
from fogrep.crypto import SeededEntropy, seeded_keypair
from fogrep.errors import FogError
from fogrep.harness.cluster import build_cluster
from fogrep.harness.spec import parse_spec
from fogrep.identity import Identity
from fogrep.model import ClientDescriptor, EntityId, MachineDescriptor, NodeDescriptor, validate_keygroup_name
from fogrep.naming import (
    BoundingBox,
    KeygroupChange,
    NamingClient,
    NamingService,
)

KEY_SEED = "tests"


def ident(kind: str, name: str, run: int = 0) -> Identity:
    return Identity.simulated(kind, name, KEY_SEED, run)


class Clock:
    def __init__(self) -> None:
        self.t = 1000.0

    def time(self) -> float:
        self.t += 1.0
        return self.t


def naming_world(nodes=("n0", "n1", "n2", "n3"), clients=("c0", "c1")):
    """A bootstrapped naming service with registered nodes and clients."""
    svc = NamingService(seeded_keypair(f"{KEY_SEED}/naming"), SeededEntropy(0, "naming"), clock=Clock())
    ids = {("node", n): ident("node", n) for n in nodes}
    ids.update({("client", c): ident("client", c) for c in clients})
    first = nodes[0]
    svc.bootstrap(NodeDescriptor(first, 0.0, 0.0, (), ids[("node", first)].public),
                  ClientDescriptor(clients[0], ids[("client", clients[0])].public))
    admin = ids[("client", clients[0])]
    for i, n in enumerate(nodes[1:], 1):
        svc.call(admin, "register", NodeDescriptor(n, float(i), float(i), (), ids[("node", n)].public))
    for c in clients[1:]:
        svc.call(admin, "register", ClientDescriptor(c, ids[("client", c)].public))
    return svc, ids


def small_cluster(extra: str = "", nodes: str = "node a\nnode b\n", seed: int = 0, **kw):
    text = f"seed {seed}\n{nodes}client app\n{extra}"
    return build_cluster(parse_spec(text), **kw)


# ---------------------------------------------------------------- policy fuzzing


@dataclass
class FuzzResult:
    requests: int = 0
    accepted: int = 0
    unauthenticated_attempts: int = 0
    self_add_attempts: int = 0
    violations: list[str] = field(default_factory=list)


def naming_fuzz(seed: int, n_requests: int) -> FuzzResult:
    """Random naming requests from legitimate, unknown and forged callers.

    Checked after every request:
    (a) a caller that cannot authenticate never changes state, and
    (b) a node never adds itself to a keygroup, nor touches one it does not
        belong to, nor performs anything but an add.
    """
    rng = random.Random(seed)
    svc, ids = naming_world()
    callers = dict(ids)
    # unknown entities and a forger holding the wrong key for a real name
    callers[("client", "ghost")] = ident("client", "ghost")
    callers[("node", "ghostnode")] = ident("node", "ghostnode")
    forger = ident("node", "forger")
    callers[("node", "n2-forged")] = Identity(EntityId("node", "n2"), forger.keypair, forger.entropy)

    c0, c1 = ids[("client", "c0")], ids[("client", "c1")]
    svc.call(c0, "create_keygroup", validate_keygroup_name("fz.one"), "n0", None)
    svc.call(c1, "create_keygroup", validate_keygroup_name("fz.two"), "n1", None)
    kg_names = ["fz.one", "fz.two", "fz.three"]
    node_names = ["n0", "n1", "n2", "n3", "ghostnode"]
    kinds = ["add_replica", "add_trigger", "remove_replica", "remove_trigger",
             "set_ttl", "add_client", "remove_client"]
    result = FuzzResult()
    counter = 0

    for _ in range(n_requests):
        key = rng.choice(sorted(callers))
        who = callers[key]
        counter += 1
        op = rng.choice(["register", "register", "tombstone", "create_keygroup",
                         "update_keygroup", "update_keygroup", "update_keygroup",
                         "get_config", "query_region"])
        kg = validate_keygroup_name(rng.choice(kg_names))
        if op == "register":
            kind = rng.choice(["node", "client", "machine"])
            name = f"x{rng.randrange(40)}"
            if kind == "node":
                args = (NodeDescriptor(name, 0.0, 0.0, (), who.public),)
            elif kind == "client":
                args = (ClientDescriptor(name, who.public),)
            else:
                args = (MachineDescriptor(name, rng.choice(node_names), f"addr-{name}", who.public),)
        elif op == "tombstone":
            args = (EntityId(rng.choice(["node", "client", "machine"]), rng.choice(node_names[:4] + ["c1", "x1"])),)
        elif op == "create_keygroup":
            args = (kg, rng.choice(node_names), None)
        elif op == "update_keygroup":
            kind = rng.choice(kinds)
            target = who.name if (who.entity.kind == "node" and rng.random() < 0.5) else rng.choice(node_names)
            if kind.endswith("client"):
                target = rng.choice(["c0", "c1", "ghost"])
            args = (kg, KeygroupChange(kind, target, rng.choice([None, 100])))
        elif op == "get_config":
            args = (kg if rng.random() < 0.5 else EntityId("node", rng.choice(node_names)), None)
        else:
            args = (BoundingBox(-90, -180, 90, 180),)

        authentic = svc.status(*key) == "active" and key in ids
        before = len(svc.accepted)
        meta_before = {k: svc.keygroup(k) for k in kg_names}
        via_wire = rng.random() < 0.5
        try:
            if via_wire:
                client = NamingClient(who, svc.public)
                frame, nonce = client.build(op, args, 1000.0 + counter)
                if rng.random() < 0.1:
                    raw = bytearray(frame)
                    raw[rng.randrange(len(raw))] ^= 0xFF
                    frame = bytes(raw)
                    authentic = False
                client.read(svc.serve_sealed(frame), nonce)
            else:
                svc.call(who, op, *args)
        except FogError:
            pass
        result.requests += 1
        if not authentic:
            result.unauthenticated_attempts += 1
        if (op == "update_keygroup" and who.entity.kind == "node"
                and args[1].kind in ("add_replica", "add_trigger") and args[1].target == who.name):
            result.self_add_attempts += 1
        grew = len(svc.accepted) > before
        if grew:
            result.accepted += 1
        if grew and not authentic:
            result.violations.append(f"unauthenticated {key} changed state via {op}")
        if grew and who.entity.kind == "node" and op == "update_keygroup":
            change = args[1]
            old = meta_before[str(args[0])]
            if change.target == who.name:
                result.violations.append(f"node {who.name} added itself to {args[0]}")
            if old is None or who.name not in old.members:
                result.violations.append(f"node {who.name} changed foreign keygroup {args[0]}")
            if change.kind not in ("add_replica", "add_trigger"):
                result.violations.append(f"node {who.name} performed {change.kind}")
        if grew and who.entity.kind == "node" and op == "create_keygroup":
            result.violations.append(f"node {who.name} created a keygroup")
    return result


def digest_maps(maps) -> bytes:
    return encode(maps)
