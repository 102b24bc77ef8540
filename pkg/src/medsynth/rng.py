"""Seeded randomness.

All sampling goes through numpy's ``Generator`` over the PCG64 bit
generator (PCG XSL RR 128/64), never the legacy global state. Sub-streams
are derived from a root seed and a text label via SHA-256, so adding a new
labelled consumer never shifts the numbers another consumer sees.
"""

import hashlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.Generator(np.random.PCG64(int(seed)))
