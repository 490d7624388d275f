"""Deterministic seed derivation.

Every stochastic operation takes an explicit seed or generator. Child seeds
are derived by hashing the parent seed together with a purpose label, so
adding or caching one stage never shifts the random stream of another.
"""

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *labels) -> int:
    """Derive a child seed from a parent seed and a sequence of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big") & 0x7FFFFFFFFFFFFFFF


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
