"""Seeded weight initializers.

He-uniform for layers feeding a ReLU, Xavier-uniform for layers with a
linear output. Biases start at zero everywhere; the draws come from a
caller-owned numpy Generator so a model is a pure function of its seed.
"""

from __future__ import annotations

import numpy as np


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype=np.float32
) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
