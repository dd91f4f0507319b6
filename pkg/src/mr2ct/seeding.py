"""Deterministic seed derivation.

Every stochastic step in the package derives its own child seed from the
user-facing seed plus fixed integer salts, so that results are reproducible
bit-for-bit regardless of how many sub-steps run or in what order they are
scheduled.
"""

import numpy as np


def derive_seed(seed: int, *salts: int) -> int:
    """Derive a child seed from a parent seed and a salt path."""
    seq = np.random.SeedSequence((int(seed),) + tuple(int(s) for s in salts))
    return int(seq.generate_state(1)[0])


def rng_for(seed: int, *salts: int) -> np.random.Generator:
    """Generator seeded by derive_seed(seed, *salts)."""
    return np.random.default_rng(derive_seed(seed, *salts))
