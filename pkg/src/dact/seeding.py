"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    DATA = 0
    INIT = 1
    CORRUPTION = 2
    DECODE = 3
    EVAL = 4


def stream_rng(root: int, stream: Stream, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root), int(stream), *map(int, keys)]))


def sub_seed(root: int, stream: Stream, *keys: int) -> int:
    """A 63-bit integer seed for ``(root, stream, *keys)``."""
    ss = np.random.SeedSequence([int(root), int(stream), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
