"""Noise models and Monte-Carlo probe generation.

Corruption noise, probe vectors and noise-level sampling each draw from a
disjoint substream of one master seed (numpy Philox via SeedSequence.spawn),
so the probes are independent of the data by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# substream ids of the master seed
STREAM_CORRUPT = 0
STREAM_PROBE = 1
STREAM_SIGMA = 2


@dataclass
class NoiseSpec:
    """Gaussian (sigma, intensity units on [0,1] scale) or Poisson (zeta gain)
    corruption; sigma_range enables blind training with per-sample levels."""

    kind: str  # "gaussian" | "poisson"
    sigma: float = 0.0
    zeta: float = 0.0
    sigma_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.kind == "gaussian":
            has_fixed = self.sigma > 0
            has_range = self.sigma_range is not None
            if has_range:
                lo, hi = self.sigma_range
                if not (0 <= lo < hi):
                    raise ValueError(f"invalid sigma_range {self.sigma_range}")
            if has_fixed == has_range:
                raise ValueError("gaussian needs exactly one of sigma > 0 or sigma_range")
        elif self.kind == "poisson":
            if self.zeta <= 0:
                raise ValueError("poisson needs zeta > 0")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")


class Rng:
    """Seeded generator with named substreams; same seed gives the same
    stream on every platform (numpy Philox)."""

    def __init__(self, seed: int):
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(3)
        self._streams = [np.random.Generator(np.random.Philox(c)) for c in children]

    def stream(self, which: int) -> np.random.Generator:
        return self._streams[which]

    @property
    def corrupt(self) -> np.random.Generator:
        return self._streams[STREAM_CORRUPT]

    @property
    def probe(self) -> np.random.Generator:
        return self._streams[STREAM_PROBE]

    @property
    def sigma(self) -> np.random.Generator:
        return self._streams[STREAM_SIGMA]


def corrupt_gaussian(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """y = x + sigma * g with g iid standard normal; x untouched."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    return x + sigma * rng.corrupt.standard_normal(x.shape)


def corrupt_poisson(x: np.ndarray, zeta: float, rng: Rng) -> np.ndarray:
    """y = zeta * Poisson(x / zeta), so E[y] = x and Var[y] = zeta * x."""
    if zeta <= 0:
        raise ValueError("zeta must be > 0")
    if np.any(x < 0):
        raise ValueError("poisson corruption requires nonnegative intensities")
    return zeta * rng.corrupt.poisson(x / zeta).astype(np.float64)


def perturb_gaussian(shape, rng: Rng) -> np.ndarray:
    """Fresh iid standard-normal probe vector (regenerated every call)."""
    return rng.probe.standard_normal(shape)


def perturb_binary(shape, rng: Rng) -> np.ndarray:
    """Fresh iid Rademacher (+1/-1 equiprobable) probe vector."""
    return rng.probe.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def sample_sigma(sigma_range: Tuple[float, float], rng: Rng) -> float:
    lo, hi = sigma_range
    if not (0 <= lo <= hi):
        raise ValueError(f"invalid sigma_range {sigma_range}")
    if lo == hi:
        return float(lo)
    return float(rng.sigma.uniform(lo, hi))
