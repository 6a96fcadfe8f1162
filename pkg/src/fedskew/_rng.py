"""Counter-based derivation of independent random streams from a master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative stream key: {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a generator keyed by ``(seed, *keys)``.

    Streams for different key tuples are statistically independent and do not
    depend on the order in which they are requested, so per-device or per-round
    streams can be handed to workers in any schedule.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive a plain integer seed (for nested experiments such as sweep trials)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
