"""Reproducible random streams.

Streams come from numpy's counter-based Philox4x64-10 bit generator.  The
128-bit key of a stream is a BLAKE2b digest of ``(master seed, purpose tag,
index)``, so any stream can be rebuilt directly without replaying others.
Gaussian variates use numpy's ziggurat sampler.
"""
import hashlib
import os

import numpy as np

GENERATOR_VERSION = "philox4x64-10/blake2b-key/ziggurat-v1"
SEED_ENV_VAR = "ENKF_LAB_SEED"

_U64 = (1 << 64) - 1


def stream_key(seed, tag, index=0):
    """128-bit Philox key for ``(seed, tag, index)``."""
    if not 0 <= int(seed) <= _U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    payload = f"{int(seed)}|{tag}|{int(index)}".encode()
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed, tag, index=0):
    """Independent ``numpy.random.Generator`` for one (purpose, replica) pair."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, index)))


def resolve_seed(seed=None, default=0):
    """Explicit seed, else ``$ENKF_LAB_SEED``, else ``default``."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None and env.strip():
        return int(env)
    return int(default)
