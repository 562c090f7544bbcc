"""Deterministic, counter-style random substreams.

Every random draw in the simulator comes from a substream keyed by
``(global_seed, purpose_tag, *indices)``.  Substreams are derived on demand
from the key alone, never from shared mutable generator state, so any
parallel execution schedule (thread count, model order, resume point)
reproduces the exact same draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"substream key parts must be non-negative, got {part}")
    return part


def substream(seed: int, *key) -> np.random.Generator:
    """Return a fresh Generator for the substream identified by the key.

    The same ``(seed, *key)`` always yields an identical stream; distinct
    keys yield statistically independent streams.
    """
    entropy = (_key_part(seed),) + tuple(_key_part(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *key) -> int:
    """Collapse ``(seed, *key)`` into a single non-negative integer seed.

    Used where an interface wants one scalar seed (e.g. per-model init
    seeds, per-run sweep seeds) while staying inside the keyed-stream
    discipline.
    """
    entropy = (_key_part(seed),) + tuple(_key_part(k) for k in key)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
