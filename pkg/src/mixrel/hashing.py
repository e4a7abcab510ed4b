"""Domain-separated hashing.

Every protocol hash is ``sha256(label_byte || input)`` with one of the
numeric labels below, giving k = 256 output bits.  Internal helpers (VRF
output, proof challenges, key derivation) use their own label bytes above
the protocol range so they can never collide with a protocol hash.
"""

from __future__ import annotations

import hashlib
from enum import IntEnum

K_BITS = 256
K_BYTES = K_BITS // 8


class HashLabel(IntEnum):
    PKT = 0
    TYPE = 1
    EXIT = 2
    RND = 3
    NEXT = 4
    BLI = 5
    TAG = 6


# private domains
DOM_VRF_OUT = 0x20
DOM_EQDL_CHALLENGE = 0x21
DOM_EQDL_NONCE = 0x22
DOM_KEYGEN = 0x23
DOM_ONION = 0x24
DOM_BEACON = 0x25
DOM_SIM = 0x26

_PREFIX = [bytes([i]) for i in range(256)]


def hash_derive(label: int, data: bytes) -> bytes:
    """k-bit output of H(label, data)."""
    if not 0 <= label < 256:
        raise ValueError("label out of range")
    return hashlib.sha256(_PREFIX[label] + data).digest()


def hash_int(label: int, data: bytes) -> int:
    return int.from_bytes(hash_derive(label, data), "big")


def xor_bytes(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")
