"""Named substreams derived from a single experiment seed.

Every source of randomness in the package (parameter init, gate noise,
data synthesis) pulls from its own named stream so that consuming one
stream never shifts another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name), stable across runs and platforms."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, key]))
