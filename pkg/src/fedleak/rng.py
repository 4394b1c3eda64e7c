"""Seeded random streams.

Every stream is a ``numpy.random.Generator`` backed by PCG64, seeded from a
``SeedSequence`` built out of the root seed plus a tuple of keys (client id,
round, purpose tag...). PCG64 output is specified bit-for-bit, so the same
keys give the same stream on every platform, and streams for different
clients never depend on the order in which they are created.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .errors import ConfigError

SEED_ENV = "FEDLEAK_SEED"
DEFAULT_SEED = 0


def _key_words(key) -> list[int]:
    if isinstance(key, (bool, np.bool_)):
        return [int(key)]
    if isinstance(key, (int, np.integer)):
        v = int(key)
        if v < 0:
            raise ValueError(f"negative rng key: {v}")
        words = []
        while True:
            words.append(v & 0xFFFFFFFF)
            v >>= 32
            if not v:
                return words
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]


def derive(seed: int, *keys) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``.

    Keys may be ints or strings; strings are hashed with BLAKE2b so that a
    speaker id like ``"p003"`` maps to a fixed entropy word.
    """
    entropy = _key_words(seed)
    # length prefix per key keeps (1, 23) and (12, 3) apart
    for k in keys:
        w = _key_words(k)
        entropy.append(len(w))
        entropy.extend(w)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else ``$FEDLEAK_SEED``, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED
