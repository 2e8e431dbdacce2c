"""Inference: push random input subsets through a trained network and
aggregate the displaced outputs into one consolidated cloud.

Subsets are drawn uniformly by default; the aggregated output is exactly
target_point_count points, emitted batch by batch in draw order so streaming
and in-memory aggregation produce identical point sets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .cloud import PointCloud
from .labeling import PointLabels
from .network import NetArchitecture, NetParams, forward, normalize
from .sampler import SamplerConfig, sample_uniform_subset, _rebalanced_draw


@dataclass
class ConsolidationRequest:
    target_point_count: int
    subset_size: int
    criterion: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ValueError("subset_size must be positive")
        if self.target_point_count < 0:
            raise ValueError("target_point_count must be non-negative")
        # target 0 is a permitted no-op (zero subsets drawn).
        if 0 < self.target_point_count < self.subset_size:
            raise ValueError("target_point_count must be at least subset_size")

    @property
    def num_subsets(self) -> int:
        return -(-self.target_point_count // self.subset_size)


class SinkError(RuntimeError):
    """Raised when the output sink fails; carries the points written so far."""

    def __init__(self, written: int, cause: Exception):
        super().__init__(f"sink failed after {written} points: {cause}")
        self.written = written


def consolidate_streaming(
    cloud: PointCloud,
    params: NetParams,
    arch: NetArchitecture,
    request: ConsolidationRequest,
    sink: Callable[[np.ndarray], None],
    labels: PointLabels | None = None,
    rebalanced: bool = False,
) -> int:
    """Emit the consolidated cloud batch by batch to `sink`; returns the number
    of points written. With rebalanced=True (experimental) subsets are drawn
    with the target-side class rebalancing instead of uniformly."""
    if rebalanced and labels is None:
        raise ValueError("rebalanced inference requires labels")
    m = request.subset_size
    if m > cloud.n:
        raise ValueError(f"subset_size {m} exceeds cloud size {cloud.n}")
    norm_cloud, transform = normalize(cloud)
    if request.num_subsets and m < arch.min_subset_size:
        raise ValueError(
            f"subset_size {m} below architecture minimum {arch.min_subset_size}"
        )
    points = norm_cloud.points.astype(
        np.float64 if params.dtype == torch.float64 else np.float32
    )
    rng = np.random.default_rng(request.seed)
    p_target = SamplerConfig().p_target

    written = 0
    with torch.no_grad():
        for _ in range(request.num_subsets):
            if rebalanced:
                idx, _ = _rebalanced_draw(
                    rng, m, p_target, labels.positive_indices, labels.negative_indices
                )
            else:
                idx = sample_uniform_subset(cloud.n, m, rng)
            subset = points[idx]
            displaced = subset + forward(params, arch, subset).numpy()
            batch = transform.invert(displaced.astype(np.float64))
            take = min(m, request.target_point_count - written)
            try:
                sink(batch[:take])
            except Exception as exc:
                raise SinkError(written, exc) from exc
            written += take
    return written


def consolidate(
    cloud: PointCloud,
    params: NetParams,
    arch: NetArchitecture,
    request: ConsolidationRequest,
    labels: PointLabels | None = None,
    rebalanced: bool = False,
) -> PointCloud:
    """Aggregate num_subsets displaced subsets into a cloud of exactly
    target_point_count points (no normals)."""
    batches: list[np.ndarray] = []
    consolidate_streaming(
        cloud, params, arch, request, batches.append, labels, rebalanced
    )
    if not batches:
        raise ValueError("target_point_count of zero produces an empty cloud")
    return PointCloud(np.vstack(batches))
