"""Deterministic random substreams derived from one root seed.

Every random draw in a run (data synthesis, estimator probes, power
method starts) flows from a single root seed through named substreams, so
traces are bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = 0xFFFFFFFF


def substream(root_seed: int, *path: str | int) -> np.random.Generator:
    """Generator for the substream of ``root_seed`` named by ``path``.

    Path components (strings or ints) are folded into the seed material
    with a stable digest, so distinct names give independent streams and
    identical names always reproduce the same stream.
    """
    keys = [int(root_seed) & _MASK]
    for part in path:
        if isinstance(part, str):
            keys.append(zlib.crc32(part.encode("utf-8")) & _MASK)
        else:
            keys.append(int(part) & _MASK)
    return np.random.default_rng(np.random.SeedSequence(keys))
