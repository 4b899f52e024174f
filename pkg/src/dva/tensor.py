"""Rank-4 tensor helpers.

Tensors are plain C-contiguous ``float64`` numpy arrays laid out as
``(batch, channel, height, width)``.  This module only adds the validation
and the few constructors the rest of the package relies on, plus the
seeded random generator every stochastic component draws from.
"""

from __future__ import annotations

import os
import zlib
from typing import NamedTuple

import numpy as np

from .errors import ShapeError

DTYPE = np.float64
DEBUG = os.environ.get("DVA_DEBUG", "0") == "1"


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


class Stats(NamedTuple):
    mean: float
    pop_stddev: float
    min: float
    max: float
    sum: float


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox (counter-based, 64-bit) generator for ``seed`` and stream ``key``.

    Distinct keys give statistically independent streams, so components can
    split the run seed without coordinating draw order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def name_key(name: str) -> int:
    """Stable integer stream key for a string (e.g. a parameter name)."""
    return zlib.crc32(name.encode("utf-8"))


def as_shape(shape) -> Shape4:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dims, got {tuple(shape)}")
    s = Shape4(*(int(d) for d in shape))
    if min(s) < 1:
        raise ShapeError(f"all dims must be >= 1, got {tuple(s)}")
    if s.size > 2**40:
        raise ShapeError(f"shape {tuple(s)} is too large")
    return s


def check4(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    if t.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 array, got shape {t.shape}")
    if DEBUG and not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{name}: non-finite values")
    return t


def zeros(shape) -> np.ndarray:
    return np.zeros(as_shape(shape), dtype=DTYPE)


def gaussian_fill(shape, mean: float, stddev: float, seed: int, *key: int) -> np.ndarray:
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    s = as_shape(shape)
    if stddev == 0:
        return np.full(s, float(mean), dtype=DTYPE)
    return make_rng(seed, *key).normal(mean, stddev, size=s)


_BINARY_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def map_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY_OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return check4(fn(a, b), op)


def reduce_stats(t: np.ndarray) -> Stats:
    if t.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    flat = np.asarray(t, dtype=DTYPE).ravel()
    total = float(flat.sum())
    mean = total / flat.size
    return Stats(
        mean=mean,
        pop_stddev=float(np.sqrt(np.mean((flat - mean) ** 2))),
        min=float(flat.min()),
        max=float(flat.max()),
        sum=total,
    )
