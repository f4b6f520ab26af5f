"""Named deterministic RNG streams.

All randomness in the package flows from one root seed. Each subsystem
draws from its own stream, keyed by a name plus integer indices (step,
epoch, sample index, ...), so any part of a run can be reproduced in
isolation and training can resume mid-run without serializing generator
state: the (root_seed, name, indices) tuple *is* the state.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

_STREAM_IDS = {
    "init": 0,       # parameter initialization
    "data": 1,       # per-epoch shuffling
    "masks": 2,      # mask-plan sampling, keyed (step, sample)
    "aug": 3,        # crop/jitter augmentation, keyed (epoch, dataset index)
    "rm": 4,         # regularized-masking draws, keyed (step, sample)
    "head": 5,       # classifier head initialization
    "gen": 6,        # synthetic data generation, keyed (class, clip)
    "test": 7,       # free stream for test fixtures
}


def stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator for the named stream at the given indices.

    Seeds must fit in 32 bits so they round-trip through checkpoints.
    """
    if name not in _STREAM_IDS:
        raise KeyError(f"unknown rng stream {name!r}")
    if not 0 <= int(root_seed) < 2**32:
        raise ConfigError(f"root seed must lie in [0, 2**32), got {root_seed}")
    key = (_STREAM_IDS[name],) + tuple(int(i) for i in indices)
    seq = np.random.SeedSequence(entropy=int(root_seed), spawn_key=key)
    return np.random.default_rng(seq)
