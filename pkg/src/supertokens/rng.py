"""Named random streams derived from one integer seed."""
from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "gumbel": 2,
    "sampling": 3,
    "augment": 4,
    "probe": 5,
    "holdout": 6,
    "teacher": 7,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` sub-keys split it further."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within ``bound * std``."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out
