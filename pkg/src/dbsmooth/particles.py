"""Particle sets, weight arithmetic, resampling, and seeded random streams.

Weights are carried unnormalized as (log normalizer, quadratic) pairs for as
long as possible and only exponentiated after subtracting the per-set
maximum, so products of many small Gaussian factors neither overflow nor
underflow.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DegenerateWeights, DimensionMismatch

__all__ = [
    "ParticleSet",
    "RandomStream",
    "normalize",
    "log_weight_combine",
    "resample_one",
    "resample_full",
    "systematic_indices",
    "weighted_mean",
    "effective_sample_size",
]


@dataclass(frozen=True)
class ParticleSet:
    """N_p particles (rows) with nonnegative weights."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if p.shape[0] != w.shape[0]:
            raise DimensionMismatch(
                f"{p.shape[0]} particles but {w.shape[0]} weights"
            )
        if w.shape[0] < 1:
            raise DegenerateWeights("empty particle set")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


class RandomStream:
    """Deterministic RNG keyed by a root seed plus an integer stream id.

    Identical (root_seed, stream_id) pairs always reproduce the same draw
    sequence, independent of what any other stream has consumed. That makes
    Monte Carlo runs and backward passes exchangeable: work scheduled in any
    order produces the same per-stream draws.
    """

    def __init__(self, root_seed: int, *stream_id: int):
        self.root_seed = int(root_seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.root_seed,) + self.stream_id))
        )

    def child(self, *extra: int) -> "RandomStream":
        return RandomStream(self.root_seed, *(self.stream_id + tuple(extra)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self):
        return f"RandomStream(root={self.root_seed}, id={self.stream_id})"


def normalize(weights: np.ndarray) -> np.ndarray:
    """Scale weights to sum to one.

    Raises DegenerateWeights when the input contains NaN, a negative entry,
    or sums to zero; that event is how filter collapse surfaces.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size == 0 or np.any(np.isnan(w)) or np.any(w < 0):
        raise DegenerateWeights("weights contain NaN or negative entries")
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateWeights(f"weight sum {total} is not positive and finite")
    return w / total


def log_weight_combine(parts: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Combine (log normalizer, quadratic) factor pairs into weights.

    Each part contributes logD - Z/2; the parts are summed in log domain
    over the whole particle set and exponentiated after subtracting the set
    maximum, so the output is defined up to a common positive scale. When
    every particle's total is non-finite the output is all zeros, which a
    subsequent normalize reports as DegenerateWeights.
    """
    total = None
    for log_d, z in parts:
        contrib = np.asarray(log_d, dtype=float) - 0.5 * np.asarray(z, dtype=float)
        total = contrib if total is None else total + contrib
    if total is None:
        raise DegenerateWeights("no weight parts supplied")
    total = np.atleast_1d(total)
    with np.errstate(invalid="ignore"):
        shift = np.nanmax(total)
    if not np.isfinite(shift):
        return np.zeros_like(total)
    out = np.exp(total - shift)
    out[~np.isfinite(total)] = 0.0
    return out


def resample_one(ps: ParticleSet, rng: np.random.Generator) -> int:
    """Single multinomial draw: index j with probability weights[j]."""
    w = normalize(ps.weights)
    u = rng.random()
    return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, ps.size - 1))


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices: one uniform offset, N_p strata."""
    w = normalize(weights)
    n = w.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w), positions, side="right").clip(0, n - 1)


def resample_full(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling of the whole set; output weights are uniform."""
    idx = systematic_indices(ps.weights, rng)
    return ParticleSet(ps.particles[idx], np.full(ps.size, 1.0 / ps.size))


def weighted_mean(ps: ParticleSet) -> np.ndarray:
    """Convex combination of the particles under the normalized weights."""
    w = normalize(ps.weights)
    return w @ ps.particles


def effective_sample_size(weights: np.ndarray) -> float:
    w = normalize(weights)
    return float(1.0 / np.sum(w * w))
