"""Seeded random streams.

All randomness uses numpy's PCG64 bit generator. A component asks for its own
stream with :func:`stream` by naming itself; the sub-seed is derived by
hashing ``(master_seed, *keys)`` with SHA-256 and feeding the first 16 bytes
to :class:`numpy.random.SeedSequence`. The scheme only depends on the master
seed and the key strings, so components stay reproducible independently of
the order in which they are created.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys) -> int:
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(master: int, *keys) -> np.random.Generator:
    """Independent PCG64 generator for the component named by ``keys``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_seed(master, *keys))))
