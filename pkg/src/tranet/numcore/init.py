"""Deterministic weight initialisers and named random sub-streams."""

from __future__ import annotations

import zlib

import numpy as np

from tranet.numcore.tensor import Parameter


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one consumer; changing one name never shifts another."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], name: str | None = None) -> Parameter:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int], name: str | None = None) -> Parameter:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros(shape: tuple[int, ...], name: str | None = None) -> Parameter:
    return Parameter(np.zeros(shape), name=name)
