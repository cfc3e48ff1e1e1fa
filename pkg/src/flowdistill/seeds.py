"""Deterministic seed derivation.

Every stage of a run draws randomness from its own child seed, derived
from the root seed and a stage label. The derivation is a plain SHA-256
hash, so it is stable across platforms and numpy versions; reruns with
the same root seed reproduce every stream exactly.
"""

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Child seed for `label` under root seed `root` (63-bit int)."""
    digest = hashlib.sha256(f"{root}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
