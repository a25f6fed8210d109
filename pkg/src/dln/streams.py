"""Keyed random streams.

Every random draw in the samplers comes from a generator keyed by a tuple of
non-negative integers (seed, sweep, conditional id, unit index, ...).  Results
then depend only on the keys and never on evaluation order or thread count.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

# conditional ids used as stream keys
COND_HIDDEN = 1
COND_ALBEDO = 2
COND_LIGHTS = 3
COND_NORMALS = 4


def keyed_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def string_key(text: str) -> int:
    """Stable 32-bit key for a string identifier (e.g. a subject id)."""
    return zlib.crc32(text.encode("utf-8"))


def keyed_normals(base: Sequence[int], unit_keys: Sequence[int], shape=()) -> np.ndarray:
    """Standard normals, one independent block of ``shape`` per unit key.

    Returns an array of shape ``(len(unit_keys), *shape)``.
    """
    shape = tuple(shape)
    out = np.empty((len(unit_keys),) + shape)
    for row, key in enumerate(unit_keys):
        out[row] = keyed_rng(*base, key).standard_normal(shape)
    return out


def keyed_blocks(base: Sequence[int], unit_keys: Sequence[int], normal_shape, n_uniform: int):
    """Per-unit standard normals and uniforms drawn from the same keyed stream."""
    normal_shape = tuple(normal_shape)
    normals = np.empty((len(unit_keys),) + normal_shape)
    uniforms = np.empty((len(unit_keys), n_uniform))
    for row, key in enumerate(unit_keys):
        gen = keyed_rng(*base, key)
        normals[row] = gen.standard_normal(normal_shape)
        uniforms[row] = gen.random(n_uniform)
    return normals, uniforms
