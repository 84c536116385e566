"""Counter-based random streams.

All stochastic code in this package draws from Philox generators keyed by
(seed, stream indices) through ``numpy.random.SeedSequence``.  Streams are
statistically independent, so results never depend on evaluation order or
thread scheduling, and a per-row stream can be extended (more draws) without
touching any other row.
"""
from __future__ import annotations

import numpy as np

__all__ = ["stream", "row_streams"]


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seed=ss))


def row_streams(seed: int, n_rows: int, *key: int) -> list[np.random.Generator]:
    """One independent generator per batch row."""
    return [stream(seed, *key, r) for r in range(n_rows)]
