"""Seed derivation for every stochastic component.

All randomness in the package flows from a single user seed through numpy's
Philox bit generator (a 64-bit counter-based PRNG with a documented, stable
stream). Each consumer gets its own stream, keyed by a fixed purpose code,
so rerunning one pipeline stage in isolation reproduces exactly the stream
it would have seen inside a full run.

Derivation rule: ``SeedSequence(entropy=seed mod 2**64, spawn_key=(code, *extra))``
feeds ``numpy.random.Philox``. The purpose codes are frozen; adding a new
purpose appends to the table and never renumbers existing entries.
"""

from __future__ import annotations

import numpy as np

_SEED_MASK = (1 << 64) - 1

# Frozen purpose table. Order is append-only.
PURPOSE_CODES = {
    "corpus": 0,
    "captions": 1,
    "init": 2,
    "stage1": 3,
    "gate": 4,
    "mining": 5,
    "stage2": 6,
    "split": 7,
    "gradcheck": 8,
}


def derive_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return the deterministic generator for (seed, purpose, *extra).

    ``extra`` integers further split a purpose stream, e.g. one stream per
    expert during stage-1 training.
    """
    if purpose not in PURPOSE_CODES:
        raise KeyError(f"unknown RNG purpose {purpose!r}")
    entropy = int(seed) & _SEED_MASK
    seq = np.random.SeedSequence(entropy=entropy, spawn_key=(PURPOSE_CODES[purpose], *extra))
    return np.random.Generator(np.random.Philox(seq))
