"""Deterministic random streams from a counter-based generator.

Every random decision in the project derives a fresh Philox stream from
(seed, *path), where the path names the decision: e.g. ("shuffle", epoch) or
("augment", epoch, sample_index).  Because streams are keyed by coordinates
rather than drawn from one shared stateful generator, results never depend
on call order or worker count, and resuming training from a checkpoint
replays the exact same randomness.
"""

import zlib

import numpy as np


def _encode(token) -> int:
    if isinstance(token, str):
        return zlib.crc32(token.encode("utf-8"))
    value = int(token)
    if value < 0:
        raise ValueError(f"stream path entries must be non-negative, got {token!r}")
    return value


def derive(seed: int, *path) -> np.random.Generator:
    """Return the generator for stream (seed, *path)."""
    key = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_encode(t) for t in path))
    return np.random.Generator(np.random.Philox(key))
