"""Named random streams.

Every stochastic choice in the project (parameter init, augmentation,
shuffling, synthetic data) draws from a stream addressed by a root seed
plus a tuple of string/int tags. Streams are counter-based (Philox), so
the value a consumer sees depends only on (seed, tags), never on how
many draws other consumers made.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *tags) -> int:
    """Derive a 128-bit Philox key from a root seed and a tag tuple."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the stream named by (seed, tags)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))


def truncated_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until within 2 std, the usual ViT init."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    np.clip(out, -2.0 * std, 2.0 * std, out=out)
    return out.astype(dtype)
