"""
Counter-based random streams.

Every random draw in fimlab comes from a Philox stream keyed by
(master_seed, trial). A trial's N samples are drawn in order from its one
stream, so a batch of n samples is the prefix of any longer batch with the
same key. Streams never share state, so results do not depend on which
worker thread evaluates a trial or in what order.
"""

import numpy as np


def stream(master_seed: int, trial: int = 0, sample: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(trial), int(sample)))
    return np.random.Generator(np.random.Philox(ss))


def init_stream(seed: int) -> np.random.Generator:
    # Weight initialization lives on its own branch of the key space.
    return stream(seed, trial=2**32 - 1, sample=0)
