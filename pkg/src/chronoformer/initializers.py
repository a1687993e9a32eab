"""Parameter initialisation."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def xavier_init(shape, fan_in: int, fan_out: int, seed=0, name: str | None = None) -> Tensor:
    """Uniform Glorot/Xavier draw on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    values = _generator(seed).uniform(-bound, bound, size=tuple(shape))
    return Tensor(values, requires_grad=True, name=name)


def constant(shape, value: float, name: str | None = None) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)), requires_grad=True, name=name)
