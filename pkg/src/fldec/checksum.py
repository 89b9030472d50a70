"""64-bit checksums used on the wire and in audit records."""

import hashlib

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK
    return h


def digest64(data: bytes) -> int:
    """Fast 64-bit content digest for large buffers (task results, weight snapshots)."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")
