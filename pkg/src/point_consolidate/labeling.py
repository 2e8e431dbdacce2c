"""Turn proxy values into per-point positive/negative labels.

Two mechanisms: a mean threshold (default pairing: curvature -> sharp) and
1-D k-means with k=3 where the lowest-center cluster is positive (default
pairing: density -> sparse). Either mechanism may be applied to either proxy.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud import ProxyKind, ProxyValues

_KMEANS_MAX_ITER = 100


class Criterion(str, Enum):
    SHARP = "sharp"
    SPARSE = "sparse"


@dataclass
class PointLabels:
    """Per-point binary labels; both classes are guaranteed non-empty."""

    positive: np.ndarray
    criterion: Criterion

    def __post_init__(self):
        pos = np.asarray(self.positive, dtype=bool)
        if pos.ndim != 1 or pos.size == 0:
            raise ValueError("labels must be a non-empty 1-D boolean array")
        count = int(pos.sum())
        if count == 0 or count == pos.size:
            raise ValueError("degenerate labeling: single class")
        self.positive = pos
        self.criterion = Criterion(self.criterion)

    @property
    def n(self) -> int:
        return self.positive.size

    @property
    def positive_count(self) -> int:
        return int(self.positive.sum())

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.positive)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.positive)


def label_by_curvature(proxy: ProxyValues) -> PointLabels:
    """Positive iff the value strictly exceeds the mean over all points."""
    if proxy.kind is not ProxyKind.CURVATURE:
        raise ValueError(f"expected curvature proxy, got {proxy.kind.value}")
    values = proxy.values
    positive = values > values.mean()
    return PointLabels(positive=positive, criterion=Criterion.SHARP)


def kmeans_1d(
    values: np.ndarray, k: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means on scalars with deterministic quantile initialization.

    Centers are initialized at the k midpoint quantiles of the distinct
    values, iterated to a fixed assignment or 100 rounds, and returned in
    ascending order with the matching per-value assignment. The seed is
    accepted for interface stability; the algorithm draws no random numbers.
    """
    del seed
    values = np.asarray(values, dtype=np.float64).ravel()
    if k < 1:
        raise ValueError("k must be positive")
    distinct = np.unique(values)
    if distinct.size < k:
        raise ValueError(
            f"k-means needs at least {k} distinct values, got {distinct.size}"
        )
    quantiles = (np.arange(k) + 0.5) / k
    centers = np.quantile(distinct, quantiles)

    assignment = np.full(values.size, -1, dtype=np.int64)
    for _ in range(_KMEANS_MAX_ITER):
        dist = np.abs(values[:, None] - centers[None, :])
        new_assignment = dist.argmin(axis=1)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = values[assignment == j]
            if members.size:
                centers[j] = members.mean()

    order = np.argsort(centers, kind="stable")
    centers = centers[order]
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return centers, remap[assignment]


def label_by_density_kmeans(proxy: ProxyValues, seed: int = 0) -> PointLabels:
    """k=3 clustering of density values; the lowest-center cluster is positive."""
    if proxy.kind is not ProxyKind.DENSITY:
        raise ValueError(f"expected density proxy, got {proxy.kind.value}")
    _, assignment = kmeans_1d(proxy.values, k=3, seed=seed)
    return PointLabels(positive=assignment == 0, criterion=Criterion.SPARSE)


def label_cloud(
    proxy: ProxyValues,
    criterion: Criterion,
    mechanism: str = "auto",
    seed: int = 0,
) -> PointLabels:
    """Label a proxy with either mechanism.

    `mechanism` is "threshold", "kmeans", or "auto" (threshold for curvature,
    k-means for density, matching the default pairing). Positive means high
    values for curvature proxies (sharp) and low values for density proxies
    (sparse).
    """
    criterion = Criterion(criterion)
    if mechanism == "auto":
        mechanism = "threshold" if proxy.kind is ProxyKind.CURVATURE else "kmeans"
    positive_high = proxy.kind is ProxyKind.CURVATURE
    values = proxy.values
    if mechanism == "threshold":
        positive = values > values.mean() if positive_high else values < values.mean()
    elif mechanism == "kmeans":
        centers, assignment = kmeans_1d(values, k=3, seed=seed)
        extreme = len(centers) - 1 if positive_high else 0
        positive = assignment == extreme
    else:
        raise ValueError(f"unknown labeling mechanism '{mechanism}'")
    return PointLabels(positive=positive, criterion=criterion)
