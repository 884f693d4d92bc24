"""Seeded random streams.

Every seed owns a family of independent Philox (counter-based, 64-bit)
streams, one per purpose, derived through ``numpy.random.SeedSequence``
spawn keys. Drawing noise therefore never shifts the dictionary or the
signal for the same seed.
"""

import numpy as np

STREAMS = {
    "dictionary": 0,
    "signal": 1,
    "noise": 2,
    "operator": 3,
    "params": 4,
    "data": 5,
    "untrained": 6,
}


def stream(seed, purpose, index=0):
    """Generator for ``(seed, purpose, index)``."""
    if purpose not in STREAMS:
        raise KeyError(f"unknown stream {purpose!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[purpose], int(index)))
    return np.random.Generator(np.random.Philox(ss))
