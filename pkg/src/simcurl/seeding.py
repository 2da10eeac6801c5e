"""Every random draw in the package descends from one root seed.

Sub-seeds are derived by hashing ``(root, purpose, *ids)``, so a stream for
user 17 in epoch 3 does not depend on how many other streams were consumed
before it. This keeps parallel and sequential execution identical.
"""

import hashlib

import numpy as np


def derive_seed(root: int, purpose: str, *ids) -> int:
    key = repr((int(root), str(purpose)) + tuple(int(i) for i in ids)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_rng(root: int, purpose: str, *ids) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, purpose, *ids)))
