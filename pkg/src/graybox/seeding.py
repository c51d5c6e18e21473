"""Named seed derivation: every random stream is ``derive(global_seed, stage, item...)``."""
from __future__ import annotations

import hashlib

import numpy as np


def derive(*parts) -> int:
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive(*parts))
