"""Point cloud container, exact k-NN index, and local geometry estimators.

All geometry here runs in float64. Neighbor queries are exact: results always
agree with a brute-force linear scan, with distance ties broken by ascending
point index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

_NORMAL_TOL = 1e-6
# Relative eigenvalue threshold below which a neighborhood is rank deficient.
_DEGENERATE_EIG_RATIO = 1e-10


class ProxyKind(str, Enum):
    CURVATURE = "curvature"
    DENSITY = "density"


@dataclass
class PointCloud:
    """An ordered set of 3D points with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None
    _bbox_diagonal: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= _NORMAL_TOL):
                raise ValueError("normals must be unit length (within 1e-6)")
            self.normals = nrm

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def bbox_diagonal(self) -> float:
        if self._bbox_diagonal is None:
            extent = self.points.max(axis=0) - self.points.min(axis=0)
            self._bbox_diagonal = float(np.linalg.norm(extent))
        return self._bbox_diagonal

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals)


@dataclass
class ProxyValues:
    """One non-negative scalar per point (curvature or density estimate)."""

    values: np.ndarray
    kind: ProxyKind
    # True for points whose value was capped / substituted (e.g. duplicates).
    flags: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("proxy values must be one-dimensional")
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise ValueError("proxy values must be finite and non-negative")
        self.values = vals
        self.kind = ProxyKind(self.kind)

    def __len__(self) -> int:
        return len(self.values)


class KnnIndex:
    """Exact k-nearest-neighbor index over a frozen copy of a cloud's points.

    Queries return squared distances recomputed in float64 directly from the
    stored coordinates, so results match a brute-force scan bit for bit. Ties
    in distance are broken by ascending point index. Immutable after build;
    concurrent read-only queries are safe.
    """

    def __init__(self, points: np.ndarray):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("index requires a non-empty (n, 3) point array")
        self._points = pts.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def point_count(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def query_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest indexed points for each query row.

        Returns (indices, squared_distances), both (len(queries), k), sorted by
        squared distance then index.
        """
        n = self.point_count
        if not 1 <= k <= n:
            raise ValueError(f"k={k} out of range [1, {n}]")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != 3:
            raise ValueError("queries must be (m, 3)")

        kk = min(n, max(k + 8, 2 * k))
        while True:
            _, nn = self._tree.query(q, k=kk)
            nn = np.atleast_2d(nn)
            d2 = ((self._points[nn] - q[:, None, :]) ** 2).sum(axis=2)
            # Sort by index first, then stable-sort by distance, so equal
            # distances come out in ascending index order.
            order = np.argsort(nn, axis=1, kind="stable")
            nn = np.take_along_axis(nn, order, axis=1)
            d2 = np.take_along_axis(d2, order, axis=1)
            order = np.argsort(d2, axis=1, kind="stable")
            nn = np.take_along_axis(nn, order, axis=1)
            d2 = np.take_along_axis(d2, order, axis=1)
            if kk == n:
                break
            # The k-th neighbor is settled once candidates strictly beyond it
            # were retrieved; a tie at the retrieval boundary may hide a
            # lower-index candidate, so widen and retry.
            boundary = d2[:, kk - 1] > d2[:, k - 1] * (1.0 + 1e-9) + 1e-300
            if boundary.all():
                break
            kk = min(n, 2 * kk)
        return nn[:, :k], d2[:, :k]

    def query(self, point: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Single-point variant of query_batch; returns ((k,), (k,)) arrays."""
        nn, d2 = self.query_batch(np.asarray(point, dtype=np.float64)[None, :], k)
        return nn[0], d2[0]


def build_index(cloud: PointCloud) -> KnnIndex:
    return KnnIndex(cloud.points)


def knn_query(index: KnnIndex, point: np.ndarray, k: int) -> list[tuple[int, float]]:
    """k nearest neighbors of `point`, as (index, squared distance) pairs
    ascending by distance (ties by index)."""
    nn, d2 = index.query(point, k)
    return [(int(i), float(d)) for i, d in zip(nn, d2)]


def neighbors_excluding_self(
    index: KnnIndex, cloud: PointCloud, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """For every cloud point, its k nearest neighbors with itself removed.

    The index must have been built over the same cloud. Returns (indices, d2)
    of shape (n, k). If a point is not among its own k+1 nearest (possible
    with many duplicates), the farthest candidate is dropped instead.
    """
    n = cloud.n
    if k + 1 > n:
        raise ValueError(f"need at least k+1={k + 1} points, cloud has {n}")
    idx, d2 = index.query_batch(cloud.points, k + 1)
    keep = np.ones_like(idx, dtype=bool)
    is_self = idx == np.arange(n)[:, None]
    has_self = is_self.any(axis=1)
    keep[has_self] = ~is_self[has_self]
    keep[~has_self, -1] = False
    return idx[keep].reshape(n, k), d2[keep].reshape(n, k)


@dataclass
class NormalEstimate:
    normals: np.ndarray
    degenerate: np.ndarray  # True where the neighborhood was rank deficient


def estimate_normals(cloud: PointCloud, k: int) -> NormalEstimate:
    """Per-point plane-fit normals from each point plus its k nearest neighbors.

    The normal is the eigenvector of the smallest covariance eigenvalue. The
    sign is fixed for determinism only (non-negative dot with the direction
    from the neighborhood centroid to the cloud centroid); orientation carries
    no meaning. Rank-deficient neighborhoods get +z and a degenerate flag.
    """
    if k < 1:
        raise ValueError("k must be positive")
    index = build_index(cloud)
    nbr_idx, _ = neighbors_excluding_self(index, cloud, k)
    pts = cloud.points
    hoods = np.concatenate([pts[:, None, :], pts[nbr_idx]], axis=1)  # (n, k+1, 3)
    centroids = hoods.mean(axis=1)
    centered = hoods - centroids[:, None, :]
    cov = np.einsum("nij,nik->njk", centered, centered) / (k + 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0].copy()

    scale = np.maximum(eigvals[:, 2], np.finfo(np.float64).tiny)
    degenerate = eigvals[:, 1] <= _DEGENERATE_EIG_RATIO * scale
    normals[degenerate] = (0.0, 0.0, 1.0)

    ref = pts.mean(axis=0)
    dots = np.einsum("ni,ni->n", normals, ref - centroids)
    flip = dots < 0
    normals[flip] *= -1.0
    # Exact-zero dot: pin the sign via the largest-magnitude component.
    amb = ~degenerate & (dots == 0.0)
    if amb.any():
        lead = np.take_along_axis(
            normals[amb], np.abs(normals[amb]).argmax(axis=1)[:, None], axis=1
        )[:, 0]
        normals[amb] *= np.where(lead < 0, -1.0, 1.0)[:, None]

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalEstimate(normals=normals, degenerate=degenerate)


def curvature_proxy(cloud: PointCloud, normals: np.ndarray, k: int) -> ProxyValues:
    """Sum of unsigned normal angles between each point and its k neighbors.

    Angles are sign-invariant, arccos(|n_i . n_j|) in [0, pi/2], so the result
    does not depend on normal orientation. Values are in radians.
    """
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != cloud.points.shape:
        raise ValueError("normals must match cloud point count")
    index = build_index(cloud)
    nbr_idx, _ = neighbors_excluding_self(index, cloud, k)
    dots = np.abs(np.einsum("ni,nji->nj", normals, normals[nbr_idx]))
    angles = np.arccos(np.clip(dots, 0.0, 1.0))
    return ProxyValues(values=angles.sum(axis=1), kind=ProxyKind.CURVATURE)


def density_proxy(cloud: PointCloud, k: int) -> ProxyValues:
    """Local density k / r^3 with r the distance to the k-th neighbor (self
    excluded). Duplicate points (r = 0) get a finite cap and a flag."""
    index = build_index(cloud)
    _, d2 = neighbors_excluding_self(index, cloud, k)
    r = np.sqrt(d2[:, -1])
    dup = r == 0.0
    values = np.empty(cloud.n, dtype=np.float64)
    if dup.any():
        diag = cloud.bbox_diagonal
        if diag == 0.0:
            raise ValueError("density undefined: all points coincide")
        values[dup] = k / (1e-9 * diag) ** 3
    values[~dup] = k / r[~dup] ** 3
    return ProxyValues(
        values=values, kind=ProxyKind.DENSITY, flags=dup if dup.any() else None
    )
