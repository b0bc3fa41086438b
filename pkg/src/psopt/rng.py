"""Named random substreams derived from a single run seed.

Every source of randomness in the package is drawn from a substream keyed by
(seed, domain, *indices).  Streams are independent of event-processing order,
which is what makes simulated runs bit-reproducible.
"""
from __future__ import annotations

import numpy as np

# Substream domains.  These values are part of the reproducibility contract:
# changing them changes every seeded result.
DOMAIN_DATA = 0
DOMAIN_INIT = 1
DOMAIN_BATCH = 2
DOMAIN_LATENCY = 3
DOMAIN_STALENESS = 4
DOMAIN_ANALYSIS = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return a generator for the substream (seed, *key)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
