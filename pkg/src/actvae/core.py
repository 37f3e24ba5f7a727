"""Seeded randomness, diagonal Gaussians and their KL divergence to N(0, I).

Random streams come from numpy's ``PCG64`` bit generator seeded through
``SeedSequence``.  Normal variates use numpy's ziggurat sampler
(``Generator.standard_normal``), which numpy keeps stable across platforms
for a given numpy release, so equal seeds give bitwise-equal streams.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

__all__ = [
    "Rng",
    "DiagonalGaussian",
    "sample_gaussian",
    "kl_to_standard_normal",
    "kl_grad",
    "kl_from_logvar",
]


class Rng:
    """A reproducible random stream (PCG64 seeded via SeedSequence)."""

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *key: int) -> "Rng":
        """Independent sub-stream addressed by ``key``.

        Forking is stateless: ``rng.fork(3)`` always yields the same stream
        regardless of how much of ``rng`` has been consumed.
        """
        return Rng(self.seed, self.spawn_key + tuple(key))

    def normal(self, shape: Any, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low: float, high: float, shape: Any = None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, shape: Any = None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["spawn_key"]))
        rng._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }
        return rng

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean)
        std = np.asarray(self.stddev)
        if mean.shape != std.shape:
            raise ValueError(f"mean shape {mean.shape} != stddev shape {std.shape}")
        if not np.all(std > 0):
            raise ValueError("stddev must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stddev", std)

    @classmethod
    def from_logvar(cls, mean: np.ndarray, logvar: np.ndarray) -> "DiagonalGaussian":
        return cls(mean, np.exp(0.5 * np.asarray(logvar)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def _check_std(stddev: np.ndarray) -> None:
    if not np.all(np.asarray(stddev) > 0):
        raise ValueError("stddev must be strictly positive")


def sample_gaussian(g: DiagonalGaussian, rng: Rng) -> np.ndarray:
    """Reparameterized draw ``mean + stddev * eps`` with ``eps ~ N(0, I)``."""
    _check_std(g.stddev)
    eps = rng.normal(g.mean.shape, dtype=np.result_type(g.mean, np.float32))
    return g.mean + g.stddev * eps


def kl_to_standard_normal(g: DiagonalGaussian) -> float | np.ndarray:
    """KL(N(mean, diag(stddev^2)) || N(0, I)), summed over the last axis."""
    _check_std(g.stddev)
    var = g.stddev * g.stddev
    return 0.5 * np.sum(g.mean * g.mean + var - 1.0 - np.log(var), axis=-1)


def kl_from_logvar(mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Same KL as :func:`kl_to_standard_normal`, parameterized by log-variance.

    Used on the training path where ``exp(0.5 * logvar)`` may underflow.
    """
    return 0.5 * np.sum(mean * mean + np.exp(logvar) - 1.0 - logvar, axis=-1)


def kl_grad(g: DiagonalGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`kl_to_standard_normal` w.r.t. (mean, stddev)."""
    _check_std(g.stddev)
    return g.mean.copy(), g.stddev - 1.0 / g.stddev
