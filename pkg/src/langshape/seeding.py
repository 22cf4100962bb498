"""Named random substreams derived from a single master seed.

``substream(master, "rl", task, desc, seed)`` hashes the name parts with
SHA-256 and feeds the digest words to :class:`numpy.random.SeedSequence` as
its spawn key, so streams for different purposes never overlap and adding a
new consumer does not shift existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def spawn_key(*parts) -> tuple[int, ...]:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def seed_sequence(master: int, *parts) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=spawn_key(*parts))


def substream(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, *parts))


def subseed(master: int, *parts) -> int:
    """A 63-bit integer seed for APIs that want plain ints."""
    return int(seed_sequence(master, *parts).generate_state(2, np.uint64)[0] >> np.uint64(1))
