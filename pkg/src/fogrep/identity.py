"""An entity's key material plus the helpers to sign and seal with it."""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import decode, encode, wire
from .crypto import (
    ControlCounter,
    Entropy,
    KeyPair,
    SealedControl,
    SeededEntropy,
    SystemEntropy,
    seal_control,
    seeded_keypair,
)
from .model import EntityId


@wire
@dataclass(frozen=True)
class IdentityFile:
    """On-disk identity: who I am, my key pair, and whom I trust for naming."""

    kind: str
    name: str
    private_key: bytes  # PKCS#8 DER
    naming_public_key: bytes = b""


@dataclass
class Identity:
    entity: EntityId
    keypair: KeyPair
    entropy: Entropy = field(default_factory=SystemEntropy)
    counter: ControlCounter = field(default_factory=ControlCounter)

    @classmethod
    def simulated(cls, kind: str, name: str, key_seed: str = "fogrep", run_seed: int = 0) -> Identity:
        """Deterministic identity; keys depend only on ``key_seed`` so they
        can be cached across runs, nonces also depend on ``run_seed``."""
        keypair = seeded_keypair(f"{key_seed}/{kind}/{name}")
        entropy = SeededEntropy(f"{run_seed}/{kind}/{name}", "nonces")
        return cls(EntityId(kind, name), keypair, entropy)

    @property
    def name(self) -> str:
        return self.entity.name

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def sign(self, data: bytes) -> bytes:
        return self.keypair.sign(data)

    def seal(self, payload: bytes, recipient_public: bytes, now_ms: float) -> SealedControl:
        return seal_control(
            payload, str(self.entity), self.keypair, recipient_public,
            self.counter.next(now_ms), self.entropy,
        )

    def to_file(self, naming_public_key: bytes = b"") -> bytes:
        return encode(IdentityFile(
            self.entity.kind, self.entity.name, self.keypair.private_der(), naming_public_key
        ))

    @classmethod
    def from_file(cls, data: bytes) -> tuple[Identity, bytes]:
        f = decode(data, IdentityFile)
        return cls(EntityId(f.kind, f.name), KeyPair.from_private_der(f.private_key)), f.naming_public_key


def parse_entity(rendered: str) -> EntityId:
    kind, _, name = rendered.partition(":")
    return EntityId(kind, name)
