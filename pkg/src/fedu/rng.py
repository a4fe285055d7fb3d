"""Named, order-independent random streams derived from one master seed."""

from __future__ import annotations

import numpy as np

# stream tags; appended to the master seed so that streams never collide
INIT = 1
CLIENT = 2
SELECT = 3
PARTITION = 4
DATA = 5
EVAL = 6
LABELED = 7


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)``; identical keys give identical draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def client_stream(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return stream(seed, CLIENT, client_id, round_index)
