"""Named, splittable RNG streams.

Every source of randomness in the engine (camera poses, backgrounds, MLP
init, diffusion batches) draws from its own stream derived from the run seed
plus a purpose label, and optionally a step index. Per-step derivation makes
checkpoint resume exact: step n of a resumed run redraws the same values as
step n of an uninterrupted run without replaying generator state.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash; also used for guidance image caching."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def stream(seed: int, name: str, step: int | None = None) -> np.random.Generator:
    """Independent generator for (seed, purpose[, step])."""
    entropy = [seed & _MASK64, fnv1a_64(name.encode("utf-8"))]
    if step is not None:
        # stored as step + 1: SeedSequence pads entropy with zeros, so a
        # trailing 0 would collide with the step-less stream of the same name
        entropy.append((step & _MASK64) + 1)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
