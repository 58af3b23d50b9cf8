"""Named random sub-streams derived from one root seed.

Each consumer asks for its own stream by name (``"cohort"``,
``"init-encoder"``, ``"shuffle-stage2"`` ...), so switching a stage on or off
never shifts the draws seen by another stage.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; pure function of its arguments."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_key(n) for n in names)]))
