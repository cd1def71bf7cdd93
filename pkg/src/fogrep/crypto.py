"""Record sealing, signed+encrypted control messages and secret rotation.

Data records travel under AES-GCM with the keygroup's 128-bit secret.
Control traffic uses a hybrid scheme: a fresh AES-128 key wrapped with
RSA-OAEP (2048-bit) for the recipient, the payload under that key, and an
RSA PKCS#1 v1.5 signature by the sender over the whole envelope.

All randomness comes from an :class:`Entropy` object. Production code uses
:class:`SystemEntropy`; simulations use :class:`SeededEntropy`, which makes
every ciphertext, signature and key pair reproducible. OAEP encoding is done
here (RFC 8017) so that its seed can come from the injected entropy; the
modular exponentiation and all private-key operations use ``cryptography``.
"""

from __future__ import annotations

import functools
import hashlib
import secrets
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import gmpy2
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .codec import decode, encode, wire
from .errors import (
    AuthenticationFailed,
    DecodeError,
    DecryptFailed,
    ReplayDetected,
    SignatureInvalid,
    UnknownSecretVersion,
)
from .model import DataRecord, SecretVersion

RSA_BITS = 2048
PUBLIC_EXPONENT = 65537
REPLAY_WINDOW_US = 60_000_000


class Entropy:
    def token_bytes(self, n: int) -> bytes:
        raise NotImplementedError

    def randbits(self, k: int) -> int:
        return int.from_bytes(self.token_bytes((k + 7) // 8), "big") >> (-k % 8)


class SystemEntropy(Entropy):
    def token_bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class SeededEntropy(Entropy):
    """Deterministic byte stream: SHA-256 over (seed, label, block counter)."""

    def __init__(self, seed: int | bytes | str, label: str = "") -> None:
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=True)
        elif isinstance(seed, str):
            seed = seed.encode()
        self._key = hashlib.sha256(seed + b"\x00" + label.encode()).digest()
        self._block = 0
        self._buf = b""

    def token_bytes(self, n: int) -> bytes:
        while len(self._buf) < n:
            self._buf += hashlib.sha256(self._key + self._block.to_bytes(8, "big")).digest()
            self._block += 1
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def fork(self, label: str) -> SeededEntropy:
        return SeededEntropy(self._key, label)


# ---------------------------------------------------------------- key pairs


@dataclass(frozen=True)
class KeyPair:
    public: bytes  # DER SubjectPublicKeyInfo
    private: rsa.RSAPrivateKey = field(repr=False, compare=False)

    def private_der(self) -> bytes:
        return self.private.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_private_der(cls, der: bytes) -> KeyPair:
        key = serialization.load_der_private_key(der, password=None)
        if not isinstance(key, rsa.RSAPrivateKey):
            raise DecodeError("identity key is not RSA")
        return cls(_public_der(key.public_key()), key)

    def sign(self, data: bytes) -> bytes:
        return self.private.sign(data, padding.PKCS1v15(), hashes.SHA256())


def _public_der(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def _random_prime(entropy: Entropy, bits: int) -> int:
    while True:
        candidate = entropy.randbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and (p - 1) % PUBLIC_EXPONENT != 0:
            return p


def generate_keypair(entropy: Entropy | None = None, bits: int = RSA_BITS) -> KeyPair:
    """RSA key pair drawn from ``entropy`` (system randomness by default)."""
    if entropy is None or isinstance(entropy, SystemEntropy):
        key = rsa.generate_private_key(public_exponent=PUBLIC_EXPONENT, key_size=bits)
        return KeyPair(_public_der(key.public_key()), key)
    while True:
        p = _random_prime(entropy, bits // 2)
        q = _random_prime(entropy, bits // 2)
        if p != q and (p * q).bit_length() == bits:
            break
    if p < q:
        p, q = q, p
    e = PUBLIC_EXPONENT
    d = pow(e, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p, q, d,
        rsa.rsa_crt_dmp1(d, p), rsa.rsa_crt_dmq1(d, q), rsa.rsa_crt_iqmp(p, q),
        rsa.RSAPublicNumbers(e, p * q),
    )
    key = numbers.private_key()
    return KeyPair(_public_der(key.public_key()), key)


@functools.lru_cache(maxsize=512)
def seeded_keypair(seed: str) -> KeyPair:
    """Deterministic key pair for simulations; cached since keygen dominates setup."""
    return generate_keypair(SeededEntropy(seed, "keypair"))


@functools.lru_cache(maxsize=1024)
def load_public(der: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_der_public_key(der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise DecodeError("public key is not RSA")
    return key


def verify(public_der: bytes, signature: bytes, data: bytes) -> None:
    try:
        load_public(public_der).verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError, DecodeError) as exc:
        raise SignatureInvalid("signature does not verify") from exc


# ---------------------------------------------------------------- OAEP


def _mgf1(seed: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return out[:length]


def oaep_encrypt(public_der: bytes, message: bytes, entropy: Entropy) -> bytes:
    """RSAES-OAEP with SHA-256/MGF1-SHA-256 and an empty label."""
    numbers = load_public(public_der).public_numbers()
    k = (numbers.n.bit_length() + 7) // 8
    h_len = 32
    if len(message) > k - 2 * h_len - 2:
        raise ValueError("message too long for OAEP")
    l_hash = hashlib.sha256(b"").digest()
    db = l_hash + b"\x00" * (k - len(message) - 2 * h_len - 2) + b"\x01" + message
    seed = entropy.token_bytes(h_len)
    masked_db = bytes(a ^ b for a, b in zip(db, _mgf1(seed, k - h_len - 1)))
    masked_seed = bytes(a ^ b for a, b in zip(seed, _mgf1(masked_db, h_len)))
    em = int.from_bytes(b"\x00" + masked_seed + masked_db, "big")
    return pow(em, numbers.e, numbers.n).to_bytes(k, "big")


def oaep_decrypt(keypair: KeyPair, ciphertext: bytes) -> bytes:
    try:
        return keypair.private.decrypt(
            ciphertext,
            padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None),
        )
    except ValueError as exc:
        raise DecryptFailed("cannot unwrap session key") from exc


# ---------------------------------------------------------------- secrets


def new_secret(entropy: Entropy) -> SecretVersion:
    return SecretVersion(1, entropy.token_bytes(16))


def rotate_secret(old: SecretVersion, entropy: Entropy) -> SecretVersion:
    return SecretVersion(old.version + 1, entropy.token_bytes(16))


# ---------------------------------------------------------------- records


@wire
@dataclass(frozen=True)
class SealedRecord:
    secret_version: int
    nonce: bytes
    ciphertext: bytes


def _record_aad(version: int) -> bytes:
    return b"fogrep-record\x00" + version.to_bytes(8, "big")


def seal_record(record: DataRecord, secret: SecretVersion, entropy: Entropy) -> SealedRecord:
    nonce = entropy.token_bytes(12)
    ct = AESGCM(secret.key).encrypt(nonce, encode(record), _record_aad(secret.version))
    return SealedRecord(secret.version, nonce, ct)


def _secret_lookup(secrets_: Mapping[int, SecretVersion] | Iterable[SecretVersion]):
    if isinstance(secrets_, Mapping):
        return dict(secrets_)
    return {s.version: s for s in secrets_}


def open_record(
    sealed: SealedRecord, secrets_: Mapping[int, SecretVersion] | Iterable[SecretVersion]
) -> DataRecord:
    secret = _secret_lookup(secrets_).get(sealed.secret_version)
    if secret is None:
        raise UnknownSecretVersion(f"no secret for version {sealed.secret_version}")
    try:
        plain = AESGCM(secret.key).decrypt(
            sealed.nonce, sealed.ciphertext, _record_aad(sealed.secret_version)
        )
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationFailed("record failed authentication") from exc
    return decode(plain, DataRecord)


# ---------------------------------------------------------------- control


@wire
@dataclass(frozen=True)
class SealedControl:
    sender: str  # rendered EntityId, e.g. "client:admin"
    counter: int
    nonce: bytes
    wrapped_key: bytes
    iv: bytes
    ciphertext: bytes
    signature: bytes

    def signed_part(self) -> bytes:
        return encode(
            (self.sender, self.counter, self.nonce, self.wrapped_key, self.iv, self.ciphertext)
        )


def seal_control(
    payload: bytes,
    sender: str,
    keypair: KeyPair,
    recipient_public: bytes,
    counter: int,
    entropy: Entropy,
) -> SealedControl:
    session_key = entropy.token_bytes(16)
    iv = entropy.token_bytes(12)
    nonce = entropy.token_bytes(16)
    wrapped = oaep_encrypt(recipient_public, session_key, entropy)
    ct = AESGCM(session_key).encrypt(iv, payload, sender.encode())
    unsigned = SealedControl(sender, counter, nonce, wrapped, iv, ct, b"")
    return SealedControl(
        sender, counter, nonce, wrapped, iv, ct, keypair.sign(unsigned.signed_part())
    )


def open_control(
    sealed: SealedControl,
    recipient: KeyPair,
    sender_public: bytes,
    guard: ReplayGuard | None = None,
) -> bytes:
    """Verify, replay-check, then decrypt. Nothing is decrypted before the
    signature has been checked."""
    verify(sender_public, sealed.signature, sealed.signed_part())
    if guard is not None:
        guard.check(sealed.sender, sealed.counter, sealed.nonce)
    key = oaep_decrypt(recipient, sealed.wrapped_key)
    try:
        return AESGCM(key).decrypt(sealed.iv, sealed.ciphertext, sealed.sender.encode())
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailed("control payload failed authentication") from exc


class ReplayGuard:
    """Rejects repeated nonces and counters older than a sliding window.

    Counters are microsecond-scale and monotone per sender process; machines
    sharing one identity interleave counters, so the check is a window rather
    than strict monotonicity. Nonces seen inside the window are remembered.
    """

    def __init__(self, window: int = REPLAY_WINDOW_US) -> None:
        self.window = window
        self._highest: dict[str, int] = {}
        self._seen: dict[str, dict[bytes, int]] = {}

    def check(self, sender: str, counter: int, nonce: bytes) -> None:
        highest = self._highest.get(sender)
        seen = self._seen.setdefault(sender, {})
        if nonce in seen:
            raise ReplayDetected(f"nonce reused by {sender}")
        if highest is not None and counter <= highest - self.window:
            raise ReplayDetected(f"stale control counter from {sender}")
        seen[nonce] = counter
        if highest is None or counter > highest:
            self._highest[sender] = counter
            floor = counter - self.window
            for n in [n for n, c in seen.items() if c <= floor]:
                del seen[n]


class ControlCounter:
    """Monotone counter anchored to a clock in microseconds."""

    def __init__(self) -> None:
        self.last = 0

    def next(self, now_ms: float) -> int:
        self.last = max(self.last + 1, int(now_ms * 1000))
        return self.last
