"""Deterministic seed derivation for parallel-safe, order-independent randomness."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *parts: object) -> int:
    """Derive a stable 64-bit sub-seed from a master seed and a context path.

    The same (master, parts) always yields the same seed, on any platform and
    in any execution order, so per-user / per-month / per-replicate streams
    can run in parallel without changing results.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode("ascii"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "big")
