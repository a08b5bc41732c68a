"""Deterministic named random streams.

Every stochastic operation takes an explicit stream. Streams are Philox
(counter-based) generators keyed by a hash of ``(seed, *path)``, so any
component can derive an independent substream from a name without
coordinating with the rest of the program, and reruns are bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def named_stream(seed: int, *path: object) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``; same inputs, same stream.

    Streams are spawnable: ``stream.spawn(n)`` yields deterministic child
    streams, used for regeneration retries.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
