"""Deterministic seed derivation.

Per-record seeds are 64-bit FNV-1a over the global seed bytes followed by the
record index (both as 8-byte big-endian unsigned ints), so a record can be
regenerated on its own and parallel runs agree with serial ones byte for byte.
"""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _u64(value: int) -> bytes:
    return (value & _MASK64).to_bytes(8, "big")


def record_seed(global_seed: int, index: int) -> int:
    """Seed for record `index` of a run seeded with `global_seed`."""
    if index < 0:
        raise ValueError(f"record index must be >= 0, got {index}")
    return fnv1a64(_u64(global_seed) + _u64(index))


def derive_seed(seed: int, *parts: int) -> int:
    """Child seed for a named sub-stream (layer, timestep, view, ...)."""
    payload = _u64(seed)
    for part in parts:
        payload += _u64(part)
    return fnv1a64(payload)
