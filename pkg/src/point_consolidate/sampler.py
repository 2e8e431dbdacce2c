"""Disjoint source/target subset pairs with class rebalancing.

Target subsets are filled by m independent Bernoulli(p_target) trials, each
success drawing uniformly without replacement from the remaining positive
points and each failure from the remaining negatives; the source repeats the
procedure with p_source over the points not already in the target, so pairs
are disjoint by construction. When a class runs out mid-subset the draw falls
back to the other class and the fallback is counted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labeling import PointLabels


@dataclass
class SamplerConfig:
    p_source: float = 0.10
    p_target: float = 0.85
    subset_fraction: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_source <= 1.0 or not 0.0 <= self.p_target <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.p_source > self.p_target:
            raise ValueError("p_source must not exceed p_target")
        if not 0.0 < self.subset_fraction <= 0.5:
            raise ValueError("subset_fraction must lie in (0, 0.5]")

    def subset_size(self, n: int) -> int:
        m = int(round(self.subset_fraction * n))
        m = max(m, 1)
        if 2 * m > n:
            raise ValueError(f"subset size {m} too large: need 2m <= n={n}")
        return m


@dataclass
class SubsetPair:
    """One disjoint (source, target) index pair, each of size m."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    m: int

    def __post_init__(self):
        src = np.asarray(self.source_indices, dtype=np.int64)
        tgt = np.asarray(self.target_indices, dtype=np.int64)
        if src.size != self.m or tgt.size != self.m:
            raise ValueError("source and target must each contain m indices")
        if np.unique(src).size != src.size or np.unique(tgt).size != tgt.size:
            raise ValueError("subset indices must be unique")
        if np.intersect1d(src, tgt).size:
            raise ValueError("source and target subsets must be disjoint")
        self.source_indices = src
        self.target_indices = tgt


def sample_uniform_subset(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m unique indices drawn uniformly without replacement from range(n)."""
    if m > n:
        raise ValueError(f"cannot draw {m} unique indices from {n} points")
    if m < 0:
        raise ValueError("m must be non-negative")
    return rng.permutation(n)[:m]


def _rebalanced_draw(
    rng: np.random.Generator,
    m: int,
    p_positive: float,
    pos_pool: np.ndarray,
    neg_pool: np.ndarray,
) -> tuple[np.ndarray, int]:
    """Draw m indices: Bernoulli(p_positive) picks the class per slot, points
    uniform without replacement within the class. Returns (indices, fallbacks)."""
    wants_pos = int((rng.random(m) < p_positive).sum())
    take_pos = min(wants_pos, pos_pool.size)
    fb_to_neg = wants_pos - take_pos
    neg_requested = (m - wants_pos) + fb_to_neg
    take_neg = min(neg_requested, neg_pool.size)
    fb_to_pos = neg_requested - take_neg
    take_pos += fb_to_pos
    if take_pos > pos_pool.size:
        raise ValueError("subset larger than available point pool")
    picked_pos = rng.permutation(pos_pool)[:take_pos]
    picked_neg = rng.permutation(neg_pool)[:take_neg]
    return np.concatenate([picked_pos, picked_neg]), fb_to_neg + fb_to_pos


def sample_pair(
    n: int,
    labels: PointLabels,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[SubsetPair, int]:
    """One rebalanced disjoint pair over a cloud of n labeled points.

    Returns the pair and the number of class-exhaustion fallbacks that
    occurred while drawing it.
    """
    if labels.n != n:
        raise ValueError("label count does not match cloud size")
    m = config.subset_size(n)
    pos = labels.positive_indices
    neg = labels.negative_indices
    target, fb_t = _rebalanced_draw(rng, m, config.p_target, pos, neg)

    in_target = np.zeros(n, dtype=bool)
    in_target[target] = True
    source, fb_s = _rebalanced_draw(
        rng, m, config.p_source, pos[~in_target[pos]], neg[~in_target[neg]]
    )
    return SubsetPair(source, target, m), fb_t + fb_s


def sample_uniform_pair(
    n: int, m: int, rng: np.random.Generator
) -> SubsetPair:
    """Disjoint pair drawn uniformly, ignoring labels (low-resolution mode)."""
    if 2 * m > n:
        raise ValueError(f"subset size {m} too large: need 2m <= n={n}")
    perm = rng.permutation(n)
    return SubsetPair(perm[m : 2 * m], perm[:m], m)


class SubsetSampler:
    """Stateful sampler owning one RNG stream and fallback counters.

    Use one instance per thread; derive seeds for parallel samplers.
    With labels=None every pair is uniform and disjoint (no rebalancing).
    """

    def __init__(self, n: int, labels: PointLabels | None, config: SamplerConfig):
        if labels is not None and labels.n != n:
            raise ValueError("label count does not match cloud size")
        self.n = n
        self.labels = labels
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.fallback_count = 0

    @property
    def subset_size(self) -> int:
        return self.config.subset_size(self.n)

    def sample_pair(self) -> SubsetPair:
        if self.labels is None:
            return sample_uniform_pair(self.n, self.subset_size, self.rng)
        pair, fallbacks = sample_pair(self.n, self.labels, self.config, self.rng)
        self.fallback_count += fallbacks
        return pair

    def sample_uniform_subset(self, m: int) -> np.ndarray:
        return sample_uniform_subset(self.n, m, self.rng)
