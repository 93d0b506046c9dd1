"""Named random substreams derived from a single run seed."""
from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "sampling": 1, "splits": 2, "synth": 3, "metrics": 4}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])
