"""Deterministic, platform-independent random streams.

Every consumer of randomness asks for a named stream derived from
(seed, *tokens). Streams are independent Philox counters, so scene
generation, sampling, and init never share state and results do not
depend on call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *tokens) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for t in tokens:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:16], "little")


def make_rng(seed: int, *tokens) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tokens)))
