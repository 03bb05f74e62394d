"""Measurements, seed-derived attestation keys and signed reports.

Digests are SHA-256. The attestation key is an Ed25519 key whose private
scalar is HKDF-SHA256 of the endorsement seed, salted with a fixed label and
bound to the ordered boot measurements, so a different seed or a different
boot chain yields an unrelated key. Ed25519 signatures are deterministic,
which keeps whole runs reproducible.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .hw import Platform

KDF_SALT = b"confmon/attestation-key/v1"
SCHEME = "ed25519+hkdf-sha256"


@dataclass(frozen=True)
class Measurement:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    subject: str
    digest: bytes

    def to_json(self) -> dict:
        return {"subject": self.subject, "digest": self.digest.hex()}


def measure(data: bytes, subject: str = "") -> Measurement:
    return Measurement(subject, hashlib.sha256(data).digest())


def chain_info(boot_measurements) -> bytes:
    parts = []
    for m in boot_measurements:
        name = m.subject.encode()
        parts.append(len(name).to_bytes(2, "big") + name + m.digest)
    return b"".join(parts)


class AttestationKey:
    """Signing key handle. ``private_bytes`` is what the monitor stores in
    its control data region."""

    def __init__(self, private_bytes: bytes, label: str = "attestation"):
        self.private_bytes = private_bytes
        self.label = label
        self._key = Ed25519PrivateKey.from_private_bytes(private_bytes)
        self.public_bytes = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.public_bytes).hexdigest()[:16]

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)

    def __deepcopy__(self, memo):
        return self  # immutable

    def __repr__(self) -> str:
        return f"<AttestationKey {self.key_id}>"


def derive_attestation_key(seed: bytes, boot_measurements) -> AttestationKey:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=KDF_SALT,
                info=chain_info(boot_measurements))
    return AttestationKey(hkdf.derive(seed))


def derive_from_platform(platform: Platform, hart_id: int, boot_measurements) -> AttestationKey:
    """Read the endorsement seed through the hardware (SeedLocked after the
    lock, PrivilegeViolation below the highest privilege) and derive."""
    return derive_attestation_key(platform.read_seed(hart_id), boot_measurements)


@dataclass(frozen=True)
class AttestationReport:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    measurement: bytes
    nonce: bytes
    boot_chain: tuple[Measurement, ...]
    key_id: str
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        body = {
            "boot_chain": [m.to_json() for m in self.boot_chain],
            "key_id": self.key_id,
            "measurement": self.measurement.hex(),
            "nonce": self.nonce.hex(),
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    def to_json(self) -> dict:
        return {
            "measurement": self.measurement.hex(),
            "nonce": self.nonce.hex(),
            "boot_chain": [m.to_json() for m in self.boot_chain],
            "key_id": self.key_id,
            "signature": self.signature.hex(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, data: dict) -> "AttestationReport":
        return cls(
            measurement=bytes.fromhex(data["measurement"]),
            nonce=bytes.fromhex(data["nonce"]),
            boot_chain=tuple(Measurement(m["subject"], bytes.fromhex(m["digest"]))
                             for m in data["boot_chain"]),
            key_id=data["key_id"],
            signature=bytes.fromhex(data["signature"]),
        )


def sign_report(key: AttestationKey, measurement: bytes, nonce: bytes,
                boot_chain=()) -> AttestationReport:
    unsigned = AttestationReport(measurement, nonce, tuple(boot_chain), key.key_id)
    return AttestationReport(measurement, nonce, tuple(boot_chain), key.key_id,
                             key.sign(unsigned.signed_bytes()))


def verify_report(public_key: bytes, report: AttestationReport) -> bool:
    if hashlib.sha256(public_key).hexdigest()[:16] != report.key_id:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(report.signature, report.signed_bytes())
    except (InvalidSignature, ValueError):
        return False
    return True
