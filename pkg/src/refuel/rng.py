"""Splittable, counter-based random streams.

Every stochastic operation takes an explicit 64-bit ``seed`` plus a *path*
naming the sub-stream (for example ``("collect", n, t, h)``).  The stream key
is the 128-bit BLAKE2b digest of the canonical text of ``(seed, *path)``;
that key drives a Philox4x64 generator whose counter starts at zero.

Split rule: a child stream is obtained by appending elements to the path.
Because keys depend only on the path, draws are identical no matter in which
order or on which thread the streams are consumed.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

from .errors import InputError

PathElement = Union[int, str]

_SEED_LIMIT = 2**64


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise InputError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise InputError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def stream_key(seed: int, *path: PathElement) -> int:
    """128-bit key for the stream at ``(seed, *path)``."""
    seed = check_seed(seed)
    parts = [str(seed)]
    for p in path:
        if isinstance(p, (bool,)) or not isinstance(p, (int, np.integer, str)):
            raise InputError(f"path elements must be int or str, got {p!r}")
        parts.append(f"i{int(p)}" if not isinstance(p, str) else f"s{p}")
    digest = hashlib.blake2b("/".join(parts).encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *path: PathElement) -> np.random.Generator:
    """Generator for the sub-stream ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def derive_seed(seed: int, *path: PathElement) -> int:
    """A 64-bit child seed, for APIs that take a plain integer seed."""
    return stream_key(seed, *path) & (_SEED_LIMIT - 1)


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from ``probs`` using the uniform variate ``u``."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorised inverse-CDF draw, one index per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
