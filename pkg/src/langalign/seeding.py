"""Deterministic seed derivation.

Every random stream in the pipeline is derived from a base seed plus a
string label, hashed with BLAKE2b. This keeps streams independent of each
other (changing the number of draws in one stage never shifts another) and
reproducible across platforms and numpy versions.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *labels: object) -> int:
    """Derive a 64-bit seed from a base seed and a sequence of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(base: int, *labels: object) -> np.random.Generator:
    """A PCG64 generator seeded by ``derive_seed(base, *labels)``."""
    return np.random.default_rng(derive_seed(base, *labels))
