"""Displacement network: a two-level set-abstraction encoder with two
feature-propagation decoder levels and a per-point head predicting 3D offsets.

The network is a function of the input subset as a set: centroid selection,
grouping and interpolation depend only on point coordinates (with canonical
lexicographic tie handling), so permuting input rows permutes output rows.
The final layer is initialized near zero, so an untrained network returns
near-identity displacements.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .cloud import PointCloud

_CHECKPOINT_MAGIC = b"PCDN"
_CHECKPOINT_VERSION = 1
# Uniform init bound for the output layer; keeps |delta| well under 1e-3
# for unit-sphere inputs while staying below the 1e-4 magnitude contract.
_HEAD_INIT_BOUND = 1e-6

LAYER_ORDER = ("sa1", "sa2", "fp1", "fp2", "head_hidden", "head_out")


@dataclass(frozen=True)
class NetArchitecture:
    """Shape of the six-layer displacement network.

    Radii are fractions of the unit-sphere scale of the normalized input;
    fractions give the number of grouping centroids per level relative to the
    previous level's point count.
    """

    sa_radii: tuple[float, float] = (0.1, 0.25)
    sa_group_sizes: tuple[int, int] = (16, 32)
    sa_widths: tuple[int, int] = (64, 128)
    sa_fractions: tuple[float, float] = (0.125, 0.25)
    fp_widths: tuple[int, int] = (128, 64)
    head_width: int = 64

    def __post_init__(self):
        for name in ("sa_radii", "sa_group_sizes", "sa_widths", "sa_fractions", "fp_widths"):
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} must have exactly two levels")
        if any(r <= 0 for r in self.sa_radii):
            raise ValueError("grouping radii must be positive")
        if any(g < 1 for g in self.sa_group_sizes):
            raise ValueError("group sizes must be at least 1")
        if any(f <= 0 or f > 1 for f in self.sa_fractions):
            raise ValueError("centroid fractions must lie in (0, 1]")
        widths = (*self.sa_widths, *self.fp_widths, self.head_width)
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")

    def layer_dims(self) -> dict[str, tuple[int, int]]:
        """(in_features, out_features) per layer, in LAYER_ORDER."""
        return {
            "sa1": (3, self.sa_widths[0]),
            "sa2": (self.sa_widths[0] + 3, self.sa_widths[1]),
            "fp1": (self.sa_widths[1] + self.sa_widths[0], self.fp_widths[0]),
            "fp2": (self.fp_widths[0] + 3, self.fp_widths[1]),
            "head_hidden": (self.fp_widths[1], self.head_width),
            "head_out": (self.head_width, 3),
        }

    @property
    def min_subset_size(self) -> int:
        return min(self.sa_group_sizes)


#: Reduced-width architecture whose gradients are cheap to sweep with finite
#: differences (267 parameters).
TINY_ARCHITECTURE = NetArchitecture(
    sa_radii=(0.3, 0.6),
    sa_group_sizes=(4, 4),
    sa_widths=(4, 8),
    sa_fractions=(0.5, 0.5),
    fp_widths=(8, 4),
    head_width=4,
)


def num_params(arch: NetArchitecture) -> int:
    """Exact trainable parameter count (weights plus biases)."""
    return sum((fin + 1) * fout for fin, fout in arch.layer_dims().values())


@dataclass
class NetParams:
    """Weight and bias tensors keyed '<layer>.weight' / '<layer>.bias'."""

    tensors: dict[str, torch.Tensor]
    dtype: torch.dtype = torch.float32

    def parameter_names(self) -> list[str]:
        return [f"{layer}.{part}" for layer in LAYER_ORDER for part in ("weight", "bias")]

    def parameter_list(self) -> list[torch.Tensor]:
        return [self.tensors[name] for name in self.parameter_names()]

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "NetParams":
        return NetParams(
            {k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.tensors.items()},
            self.dtype,
        )


def init_params(
    arch: NetArchitecture, seed: int, dtype: torch.dtype = torch.float32
) -> NetParams:
    """He-uniform hidden layers, zero biases, near-zero output layer."""
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for layer, (fin, fout) in arch.layer_dims().items():
        if layer == "head_out":
            bound = _HEAD_INIT_BOUND
            bias = (torch.rand(fout, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        else:
            bound = float(np.sqrt(6.0 / fin))
            bias = torch.zeros(fout, dtype=torch.float64)
        weight = (torch.rand(fout, fin, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        tensors[f"{layer}.weight"] = weight.to(dtype).requires_grad_(True)
        tensors[f"{layer}.bias"] = bias.to(dtype).requires_grad_(True)
    return NetParams(tensors, dtype)


@dataclass
class NormalizationTransform:
    """Center/scale mapping a cloud into the unit sphere and back."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center at the bounding-box midpoint and scale so max point norm is 1."""
    pts = cloud.points
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
    centered = pts - center
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale == 0.0:
        raise ValueError("cannot normalize: all points coincide")
    transform = NormalizationTransform(center=center, scale=scale)
    return PointCloud(centered / scale, cloud.normals), transform


def _lexicographic_min(points: np.ndarray, candidates: np.ndarray) -> int:
    cpts = points[candidates]
    order = np.lexsort((cpts[:, 2], cpts[:, 1], cpts[:, 0]))
    return int(candidates[order[0]])


def _farthest_point_indices(points: np.ndarray, count: int) -> np.ndarray:
    """Farthest-point sampling started at the lexicographically smallest point,
    with lexicographic tie breaking, so the result is a function of the set."""
    n = points.shape[0]
    count = min(count, n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = _lexicographic_min(points, np.arange(n))
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, count):
        far = d2.max()
        ties = np.flatnonzero(d2 == far)
        nxt = ties[0] if ties.size == 1 else _lexicographic_min(points, ties)
        chosen[i] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


def _pairwise_d2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances (len(a), len(b)) via the expanded dot product."""
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _smallest_k(d2: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per row, the k smallest entries of d2 in ascending order."""
    if k < d2.shape[1]:
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    else:
        part = np.broadcast_to(np.arange(d2.shape[1]), d2.shape)
    d2_sel = np.take_along_axis(d2, part, axis=1)
    order = np.argsort(d2_sel, axis=1, kind="stable")
    return (
        np.take_along_axis(part, order, axis=1),
        np.take_along_axis(d2_sel, order, axis=1),
    )


def _radius_groups(
    points: np.ndarray, centroids: np.ndarray, radius: float, group_size: int
) -> np.ndarray:
    """Indices (C, G) of up to group_size nearest points within radius of each
    centroid, padded by repeating the nearest point (max-pooling ignores the
    repeats). Every centroid is itself a point, so groups are never empty."""
    d2 = _pairwise_d2(centroids, points)
    idx, d2_sorted = _smallest_k(d2, min(group_size, points.shape[0]))
    within = d2_sorted <= radius * radius
    return np.where(within, idx, idx[:, :1])


def _interp_weights(
    fine: np.ndarray, coarse: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-squared-distance weights of the up-to-3 nearest coarse points
    for each fine point. Returns (indices (Nf, t), weights (Nf, t))."""
    d2 = _pairwise_d2(fine, coarse)
    idx, d2_sel = _smallest_k(d2, min(3, coarse.shape[0]))
    w = 1.0 / (d2_sel + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def _linear(params: NetParams, layer: str, x: torch.Tensor) -> torch.Tensor:
    return F.linear(x, params.tensors[f"{layer}.weight"], params.tensors[f"{layer}.bias"])


def forward(params: NetParams, arch: NetArchitecture, subset) -> torch.Tensor:
    """Per-point displacement offsets for a subset in the normalized frame.

    `subset` is an (m, 3) array or tensor; the result is an (m, 3) tensor of
    the parameter dtype, differentiable with respect to the parameters.
    """
    if isinstance(subset, torch.Tensor):
        xyz_np = subset.detach().cpu().numpy().astype(np.float64)
        xyz = subset.to(params.dtype)
    else:
        xyz_np = np.asarray(subset, dtype=np.float64)
        xyz = torch.from_numpy(xyz_np).to(params.dtype)
    m = xyz_np.shape[0]
    if xyz_np.ndim != 2 or xyz_np.shape[1] != 3:
        raise ValueError("subset must have shape (m, 3)")
    if m < arch.min_subset_size:
        raise ValueError(
            f"subset size {m} below architecture minimum {arch.min_subset_size}"
        )

    # Level geometry (indices and interpolation weights) is a pure function of
    # the coordinates; gradients flow only through the feature tensors.
    n1 = max(1, int(round(m * arch.sa_fractions[0])))
    c1_idx = _farthest_point_indices(xyz_np, n1)
    c1_np = xyz_np[c1_idx]
    g1 = _radius_groups(xyz_np, c1_np, arch.sa_radii[0], arch.sa_group_sizes[0])

    n2 = max(1, int(round(len(c1_idx) * arch.sa_fractions[1])))
    c2_local = _farthest_point_indices(c1_np, n2)
    c2_np = c1_np[c2_local]
    g2 = _radius_groups(c1_np, c2_np, arch.sa_radii[1], arch.sa_group_sizes[1])

    i1_idx, i1_w = _interp_weights(c1_np, c2_np)
    i0_idx, i0_w = _interp_weights(xyz_np, c1_np)

    c1_t = xyz[torch.from_numpy(c1_idx)]
    c2_t = c1_t[torch.from_numpy(c2_local)]

    # Encoder: per-group shared dense layer on radius-normalized relative
    # coordinates (plus features at level 2), max-pooled per group.
    g1_t = torch.from_numpy(g1)
    rel1 = (xyz[g1_t] - c1_t[:, None, :]) / arch.sa_radii[0]
    f1 = F.relu(_linear(params, "sa1", rel1)).max(dim=1).values  # (n1, w1)

    g2_t = torch.from_numpy(g2)
    rel2 = (c1_t[g2_t] - c2_t[:, None, :]) / arch.sa_radii[1]
    feat2 = torch.cat([rel2, f1[g2_t]], dim=2)
    f2 = F.relu(_linear(params, "sa2", feat2)).max(dim=1).values  # (n2, w2)

    # Decoder: inverse-distance interpolation of coarse features onto finer
    # points, concatenated with the skip features.
    w1_t = torch.from_numpy(i1_w).to(params.dtype)
    up1 = (f2[torch.from_numpy(i1_idx)] * w1_t[:, :, None]).sum(dim=1)
    d1 = F.relu(_linear(params, "fp1", torch.cat([f1, up1], dim=1)))  # (n1, fp1)

    w0_t = torch.from_numpy(i0_w).to(params.dtype)
    up0 = (d1[torch.from_numpy(i0_idx)] * w0_t[:, :, None]).sum(dim=1)
    d0 = F.relu(_linear(params, "fp2", torch.cat([xyz, up0], dim=1)))  # (m, fp2)

    h = F.relu(_linear(params, "head_hidden", d0))
    return _linear(params, "head_out", h)


def _torch_dtype_code(dtype: torch.dtype) -> int:
    if dtype == torch.float32:
        return 4
    if dtype == torch.float64:
        return 8
    raise ValueError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(path, params: NetParams, arch: NetArchitecture) -> None:
    """Little-endian binary: magic, version, dtype, architecture, flat params."""
    header = struct.pack(
        "<4sIB2d2I2d2I2II",
        _CHECKPOINT_MAGIC,
        _CHECKPOINT_VERSION,
        _torch_dtype_code(params.dtype),
        *arch.sa_radii,
        *arch.sa_group_sizes,
        *arch.sa_fractions,
        *arch.sa_widths,
        *arch.fp_widths,
        arch.head_width,
    )
    flat = np.concatenate(
        [p.detach().cpu().numpy().ravel() for p in params.parameter_list()]
    )
    np_dtype = "<f4" if params.dtype == torch.float32 else "<f8"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype(np_dtype).tobytes())


def load_checkpoint(path) -> tuple[NetParams, NetArchitecture]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_fmt = "<4sIB2d2I2d2I2II"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size + 8:
        raise ValueError("checkpoint file truncated")
    fields = struct.unpack_from(head_fmt, blob)
    if fields[0] != _CHECKPOINT_MAGIC:
        raise ValueError("not a displacement-net checkpoint (bad magic)")
    if fields[1] != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {fields[1]}")
    dtype = torch.float32 if fields[2] == 4 else torch.float64
    arch = NetArchitecture(
        sa_radii=(fields[3], fields[4]),
        sa_group_sizes=(fields[5], fields[6]),
        sa_fractions=(fields[7], fields[8]),
        sa_widths=(fields[9], fields[10]),
        fp_widths=(fields[11], fields[12]),
        head_width=fields[13],
    )
    (count,) = struct.unpack_from("<Q", blob, head_size)
    np_dtype = "<f4" if dtype == torch.float32 else "<f8"
    flat = np.frombuffer(blob, dtype=np_dtype, offset=head_size + 8)
    if flat.size != count or count != num_params(arch):
        raise ValueError(
            f"checkpoint parameter count mismatch: header {count}, "
            f"payload {flat.size}, architecture {num_params(arch)}"
        )
    tensors: dict[str, torch.Tensor] = {}
    offset = 0
    for layer, (fin, fout) in arch.layer_dims().items():
        w = flat[offset : offset + fin * fout].reshape(fout, fin)
        offset += fin * fout
        b = flat[offset : offset + fout]
        offset += fout
        tensors[f"{layer}.weight"] = torch.from_numpy(w.copy()).to(dtype).requires_grad_(True)
        tensors[f"{layer}.bias"] = torch.from_numpy(b.copy()).to(dtype).requires_grad_(True)
    return NetParams(tensors, dtype), arch
