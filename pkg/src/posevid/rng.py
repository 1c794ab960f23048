"""Deterministic counter-based randomness.

Every draw is a pure function of (seed, stream, position): the stream number
identifies a use site, and numpy's Philox engine provides the counter-based
core. Re-requesting a stream replays the same values regardless of what was
drawn in between, so overlapped-window inference and batched training can
draw noise in any order without changing results.

Stream numbers are derived from small integer tags plus structural indices
(frame, timestep, training step, ...) through a SplitMix64-style mixer. All
tags live here so that accidental collisions stay visible in one place.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Stream tags. Keep values distinct; never reuse a retired number.
INIT_LATENT = 1      # initial latent for frame i at chain start
STEP_NOISE = 2       # per-(frame, t) noise inside a reverse chain
FACE_INIT = 3        # initial latent for a face crop chain
FACE_STEP = 4        # per-(frame, t) noise inside a face chain
PARAM_INIT = 5       # network weight initialization
TRAIN_BATCH = 6      # which (identity, frame, reference) enter a batch
TRAIN_NOISE = 7      # forward-process noise for a training batch
TRAIN_T = 8          # timestep draw for a training batch
TRAIN_DROP = 9       # condition-dropout coin flips
TRAIN_PERTURB = 10   # pose perturbation during condition rendering
WORLD_IDENTITY = 11  # identity sampling
WORLD_POSE = 12      # pose sequence sampling
ORACLE = 13          # test-side oracle draws


def _splitmix(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def derive_stream(*parts: int) -> int:
    """Fold integer tags/indices into one 64-bit stream number."""
    acc = 0x8422EB1D55A2D7C3
    for p in parts:
        acc = _splitmix(acc ^ (int(p) & _MASK))
    return acc


class Rng:
    """Counter-based generator: draws depend only on (seed, stream, position).

    Each call builds a fresh Philox generator keyed by (seed, stream), so two
    calls with the same stream return identical arrays. Call sites must use
    distinct streams for draws that are meant to be independent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK

    def _gen(self, stream: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=[self.seed, int(stream) & _MASK])
        )

    def normal(self, stream: int, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen(stream).standard_normal(shape, dtype=dtype)

    def uniform(self, stream: int, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen(stream).uniform(low, high, shape)

    def integers(self, stream: int, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen(stream).integers(low, high, size=shape)
