"""Counter-based seed derivation.

Every random stream in a run is ``default_rng(SeedSequence([seed, stream,
*counters]))`` where ``seed`` is the single global seed, ``stream`` names
the consumer and the counters index the entity (agent id, image index,
round number). Streams never share state, so results do not depend on the
order in which agents or images are processed.
"""

import numpy as np

PARTITION = 1
SUBSAMPLE = 2
MODEL_INIT = 3
ROUND_SAMPLING = 4
LOCAL_SHUFFLE = 5
SYNTHETIC = 6
BENCH = 7


def seed_sequence(seed, stream, *counters) -> np.random.SeedSequence:
    entropy = [int(seed), int(stream), *(int(c) for c in counters)]
    if any(e < 0 for e in entropy):
        raise ValueError(f"seeds and counters must be non-negative, got {entropy}")
    return np.random.SeedSequence(entropy)


def rng(seed, stream, *counters) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, stream, *counters))
