"""Deterministic, parallel-safe seed derivation.

Every experiment derives per-trial generators from a master seed and an
integer key path, so trials can run in any order (or in parallel) and
still reproduce bit-for-bit.
"""

from __future__ import annotations

import numpy as np


def child_seq(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))


def child_rng(master: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(child_seq(master, *key))


def child_int(master: int, *key: int) -> int:
    """A derived 63-bit integer seed, for APIs that take plain ints."""
    return int(child_seq(master, *key).generate_state(1, np.uint64)[0] >> np.uint64(1))
