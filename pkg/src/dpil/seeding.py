"""Seed derivation: every stage gets a seed from (root seed, stage name)."""

import hashlib

import numpy as np


def derive_seed(root, *names):
    """Stable 63-bit seed from a root seed and any number of name parts."""
    key = ":".join([str(int(root)), *map(str, names)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


def stage_rng(root, *names):
    return np.random.default_rng(derive_seed(root, *names))
