"""Exception hierarchy.

Every error carries a stable ``code`` string. Codes travel over the wire in
response envelopes and are printed by the command-line tools, so they must
not change once published.
"""

from __future__ import annotations


class FogError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code)
        self.message = message


_REGISTRY: dict[str, type[FogError]] = {}


def _error(name: str, code: str, base: type[FogError] = FogError) -> type[FogError]:
    cls = type(name, (base,), {"code": code})
    _REGISTRY[code] = cls
    return cls


def from_code(code: str, message: str = "") -> FogError:
    """Rebuild an exception received as ``(code, message)`` over the wire."""
    cls = _REGISTRY.get(code, FogError)
    err = cls(message)
    if cls is FogError:
        err.code = code
    return err


# core model
MalformedName = _error("MalformedName", "MALFORMED_NAME")
KeyMismatch = _error("KeyMismatch", "KEY_MISMATCH")
DecodeError = _error("DecodeError", "DECODE_ERROR")

# naming service
AlreadyBootstrapped = _error("AlreadyBootstrapped", "ALREADY_BOOTSTRAPPED")
Unauthenticated = _error("Unauthenticated", "UNAUTHENTICATED")
NameTaken = _error("NameTaken", "NAME_TAKEN")
UnknownParentNode = _error("UnknownParentNode", "UNKNOWN_PARENT_NODE")
NotFound = _error("NotFound", "NOT_FOUND")
StillReferenced = _error("StillReferenced", "STILL_REFERENCED")
UnknownNode = _error("UnknownNode", "UNKNOWN_NODE")
UnknownKeygroup = _error("UnknownKeygroup", "UNKNOWN_KEYGROUP")
Forbidden = _error("Forbidden", "FORBIDDEN")
LastReplica = _error("LastReplica", "LAST_REPLICA")
AlreadyMember = _error("AlreadyMember", "ALREADY_MEMBER")
MalformedRegion = _error("MalformedRegion", "MALFORMED_REGION")

# storage
ConnectorFailure = _error("ConnectorFailure", "CONNECTOR_FAILURE")
StorageFailure = _error("StorageFailure", "STORAGE_FAILURE")

# transport
Timeout = _error("Timeout", "TIMEOUT")
UnknownEndpoint = _error("UnknownEndpoint", "UNKNOWN_ENDPOINT")

# crypto
UnknownSecretVersion = _error("UnknownSecretVersion", "UNKNOWN_SECRET_VERSION")
AuthenticationFailed = _error("AuthenticationFailed", "AUTHENTICATION_FAILED")
SignatureInvalid = _error("SignatureInvalid", "SIGNATURE_INVALID")
DecryptFailed = _error("DecryptFailed", "DECRYPT_FAILED")
ReplayDetected = _error("ReplayDetected", "REPLAY_DETECTED")

# daemon
NotReplicaNode = _error("NotReplicaNode", "NOT_REPLICA_NODE")
NotTriggerNode = _error("NotTriggerNode", "NOT_TRIGGER_NODE")
NoLiveMachines = _error("NoLiveMachines", "NO_LIVE_MACHINES")
NamingUnreachable = _error("NamingUnreachable", "NAMING_UNREACHABLE")

# client
NoOpMovement = _error("NoOpMovement", "NOOP_MOVEMENT")

# simulation harness
SpecInvalid = _error("SpecInvalid", "SPEC_INVALID")
InsufficientReplicas = _error("InsufficientReplicas", "INSUFFICIENT_REPLICAS")
ScenarioAssertionFailed = _error("ScenarioAssertionFailed", "SCENARIO_ASSERTION_FAILED")
IoFailure = _error("IoFailure", "IO_FAILURE")
