"""Chamfer reconstruction loss, parameter gradients, and the training loop.

The loss is the bidirectional sum of squared nearest-neighbor distances
divided by the subset size m (the evaluation metric keeps the raw sum, and
loss * m == metric exactly). Nearest-neighbor ties break toward the lowest
index, which fixes the subgradient. Training draws a fresh disjoint pair
every iteration and applies one Adam step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .cloud import KnnIndex, PointCloud
from .labeling import PointLabels
from .network import NetArchitecture, NetParams, forward, init_params, normalize
from .sampler import SamplerConfig, SubsetSampler

# Below this size a full distance matrix beats building a spatial index.
_BRUTE_FORCE_LIMIT = 256


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 10_000
    gradient_check_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.gradient_check_mode else torch.float32


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    fallbacks: list[int] = field(default_factory=list)

    def append(self, loss: float, wall: float, fallback: int) -> None:
        self.losses.append(loss)
        self.wall_ms.append(wall)
        self.fallbacks.append(fallback)

    def __len__(self) -> int:
        return len(self.losses)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,loss,wall_ms\n")
            for i, (loss, wall) in enumerate(zip(self.losses, self.wall_ms)):
                fh.write(f"{i},{loss:.10g},{wall:.3f}\n")


def _as_points(arr) -> np.ndarray:
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValueError("expected a non-empty (n, 3) point array")
    return pts


def _nearest(queries: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest target per query (ties -> lowest index) and the
    squared distance. Uses a spatial index for large target sets; both paths
    compute identical float64 distances."""
    if targets.shape[0] > _BRUTE_FORCE_LIMIT:
        idx, d2 = KnnIndex(targets).query_batch(queries, 1)
        return idx[:, 0], d2[:, 0]
    d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, np.take_along_axis(d2, idx[:, None], axis=1)[:, 0]


def chamfer_distance(p, q) -> float:
    """Bidirectional sum of squared nearest-neighbor distances between sets."""
    p = _as_points(p)
    q = _as_points(q)
    _, fwd = _nearest(p, q)
    _, bwd = _nearest(q, p)
    return float(fwd.sum() + bwd.sum())


def chamfer_loss(predicted, target) -> float:
    """Chamfer distance divided by the (shared) set size m."""
    predicted = _as_points(predicted)
    target = _as_points(target)
    if predicted.shape[0] != target.shape[0]:
        raise ValueError("predicted and target must have equal sizes")
    return chamfer_distance(predicted, target) / predicted.shape[0]


def chamfer_loss_with_grad(predicted, target) -> tuple[float, np.ndarray]:
    """Loss plus its gradient with respect to the predicted points."""
    predicted = _as_points(predicted)
    target = _as_points(target)
    m = predicted.shape[0]
    if target.shape[0] != m:
        raise ValueError("predicted and target must have equal sizes")
    nn_fwd, fwd = _nearest(predicted, target)
    nn_bwd, bwd = _nearest(target, predicted)
    loss = float(fwd.sum() + bwd.sum()) / m
    grad = 2.0 * (predicted - target[nn_fwd]) / m
    np.add.at(grad, nn_bwd, 2.0 * (predicted[nn_bwd] - target) / m)
    return loss, grad


def backward(
    params: NetParams,
    arch: NetArchitecture,
    subset: np.ndarray,
    target: np.ndarray,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and the gradient of chamfer_loss(subset + net(subset), target)
    with respect to every parameter (reverse mode)."""
    subset = _as_points(subset)
    target = _as_points(target)
    m = subset.shape[0]
    if target.shape[0] != m:
        raise ValueError("subset and target must have equal sizes")

    subset_t = torch.from_numpy(subset).to(params.dtype)
    target_t = torch.from_numpy(target).to(params.dtype)
    predicted = subset_t + forward(params, arch, subset_t)

    pred_np = predicted.detach().cpu().numpy().astype(np.float64)
    nn_fwd, _ = _nearest(pred_np, target)
    nn_bwd, _ = _nearest(target, pred_np)

    fwd_term = ((predicted - target_t[torch.from_numpy(nn_fwd)]) ** 2).sum()
    bwd_term = ((predicted[torch.from_numpy(nn_bwd)] - target_t) ** 2).sum()
    loss_t = (fwd_term + bwd_term) / m

    names = params.parameter_names()
    grads = torch.autograd.grad(loss_t, params.parameter_list())
    for name, grad in zip(names, grads):
        if not torch.isfinite(grad).all():
            raise RuntimeError(f"non-finite gradient in layer parameter {name}")
    return float(loss_t.detach()), dict(zip(names, grads))


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.tensors.items()},
            v={k: torch.zeros_like(p) for k, p in params.tensors.items()},
        )


def adam_step(
    params: NetParams,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    config: TrainConfig,
) -> tuple[NetParams, AdamState]:
    """Standard Adam with bias correction; updates params/state in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    with torch.no_grad():
        for name, p in params.tensors.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = state.m[name] / bias1
            v_hat = state.v[name] / bias2
            p.sub_(config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon))
    return params, state


def train(
    cloud: PointCloud,
    labels: PointLabels | None,
    sampler_config: SamplerConfig,
    train_config: TrainConfig,
    arch: NetArchitecture | None = None,
) -> tuple[NetParams, TrainLog]:
    """Optimize a displacement network on freshly sampled subset pairs.

    With labels=None the pairs are uniform (no rebalancing). Returns the
    trained parameters and the per-iteration log.
    """
    arch = arch or NetArchitecture()
    norm_cloud, _ = normalize(cloud)
    sampler = SubsetSampler(cloud.n, labels, sampler_config)
    if sampler.subset_size < arch.min_subset_size:
        raise ValueError(
            f"subset size {sampler.subset_size} below architecture minimum "
            f"{arch.min_subset_size}; raise subset_fraction or shrink the net"
        )
    params = init_params(arch, train_config.seed, dtype=train_config.dtype)
    state = AdamState.zeros(params)
    np_dtype = np.float64 if train_config.gradient_check_mode else np.float32
    points = norm_cloud.points.astype(np_dtype)
    log = TrainLog()

    for it in range(train_config.iterations):
        start = time.perf_counter()
        fallback_before = sampler.fallback_count
        pair = sampler.sample_pair()
        source = points[pair.source_indices]
        target = points[pair.target_indices]
        loss, grads = backward(params, arch, source, target)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at iteration {it}")
        adam_step(params, grads, state, train_config)
        log.append(
            loss,
            (time.perf_counter() - start) * 1e3,
            sampler.fallback_count - fallback_before,
        )
    return params, log
