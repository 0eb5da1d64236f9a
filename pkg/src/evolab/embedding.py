"""Deterministic local text embeddings.

No learned model: each text is feature-hashed over character 3-grams into a
fixed 256-dimensional float64 vector and L2-normalized. The hash is keyed
blake2b with a fixed key, so the same text embeds to bit-identical vectors
across processes, platforms, and runs. Empty or token-free text embeds to the
zero vector, and cosine against a zero vector is defined as 0.0.

Words are wrapped in angle brackets before n-gramming ("cat" contributes
"<ca", "cat", "at>"), which keeps word identity while still letting related
phrasings overlap.
"""

from __future__ import annotations

from functools import lru_cache
from hashlib import blake2b

import numpy as np

DIM = 256
_HASH_KEY = b"evolab.embed.v1"


def _grams(text: str) -> list[str]:
    grams: list[str] = []
    for tok in text.casefold().split():
        wrapped = f"<{tok}>"
        if len(wrapped) <= 3:
            grams.append(wrapped)
            continue
        grams.extend(wrapped[i : i + 3] for i in range(len(wrapped) - 2))
    return grams


@lru_cache(maxsize=8192)
def embed(text: str) -> np.ndarray:
    """Embed text into a read-only unit vector (or the zero vector)."""
    vec = np.zeros(DIM, dtype=np.float64)
    for gram in _grams(text):
        digest = blake2b(gram.encode("utf-8"), key=_HASH_KEY, digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        index = (value >> 1) % DIM
        sign = 1.0 if value & 1 else -1.0
        vec[index] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    vec.setflags(write=False)
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # Inputs are unit or zero vectors, so the dot product is the cosine.
    if not a.any() or not b.any():
        return 0.0
    return float(np.dot(a, b))
