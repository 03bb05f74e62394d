"""Reference computations the tests compare the library against.

Each one is written from first principles (raw JSON, hmac, hashlib, nested
loops) and shares no code with the package it checks.
"""
from __future__ import annotations

import hashlib
import hmac
import json
from importlib import resources

PAGE = 4096
NUM_REGS = 16
HV_STATUS_REG, HV_VALUE_REG = 15, 14


def hkdf_sha256(ikm: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    """Extract-then-expand key derivation, spelled out with hmac."""
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    out, block, counter = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def boot_chain_info(pairs: list[tuple[str, bytes]]) -> bytes:
    """Length-prefixed subject name followed by the raw digest, in order."""
    return b"".join(len(s.encode()).to_bytes(2, "big") + s.encode() + d for s, d in pairs)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def ranges_disjoint(ranges: list[tuple[int, int]]) -> bool:
    """Quadratic pairwise check, no sorting."""
    for i in range(len(ranges)):
        for j in range(len(ranges)):
            if i != j:
                a, b = ranges[i], ranges[j]
                if a[0] < b[1] and b[0] < a[1]:
                    return False
    return True


def raw_whitelist() -> dict[int, dict]:
    text = resources.files("confmon.data").joinpath("whitelist.json").read_text()
    return {c["id"]: c for c in json.loads(text)["calls"]}


def outbound_baseline(cvm_regs: list[int], call_id: int, cvm_id: int, reason: int) -> list[int]:
    """What the hypervisor may see after a CVM request is routed out:
    declared argument registers, the exit reason and the CVM id, zero
    elsewhere."""
    args = set(raw_whitelist()[call_id]["args"])
    view = [cvm_regs[r] if r in args else 0 for r in range(NUM_REGS)]
    view[HV_STATUS_REG] = reason
    view[HV_VALUE_REG] = cvm_id
    return view
