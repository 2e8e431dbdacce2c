"""Quantitative evaluation: edge-aware ground-truth sampling, F-score,
density uniformity, normal error in sharp regions, and point-to-mesh distance.

All metrics are deterministic; point-to-mesh distances are exact (the BVH
only prunes, so it returns the same minima as a scan over all triangles).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cloud import KnnIndex, PointCloud, density_proxy

_BVH_LEAF_SIZE = 8
# Meshes at or below this face count are scanned directly.
_BVH_MIN_FACES = 64
_POINT_CHUNK = 4_000_000


@dataclass
class TriangleMesh:
    """Triangle mesh with per-edge adjacency (at most two faces per edge)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] == 0:
            raise ValueError("vertices must be a non-empty (v, 3) array")
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] == 0:
            raise ValueError("faces must be a non-empty (f, 3) array")
        if faces.min() < 0 or faces.max() >= verts.shape[0]:
            raise ValueError("face references a vertex that does not exist")
        self.vertices = verts
        self.faces = faces

        tris = verts[faces]
        cross = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
        areas = np.linalg.norm(cross, axis=1)
        if (areas == 0.0).any():
            raise ValueError("mesh contains zero-area faces")
        self._face_normals = cross / areas[:, None]

        raw = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        raw.sort(axis=1)
        edges, inverse, counts = np.unique(
            raw, axis=0, return_inverse=True, return_counts=True
        )
        if counts.max() > 2:
            raise ValueError("edge shared by more than two faces (non-manifold)")
        self._edges = edges
        face_of_entry = np.repeat(np.arange(faces.shape[0]), 3)
        order = np.argsort(inverse, kind="stable")
        edge_faces = np.full((edges.shape[0], 2), -1, dtype=np.int64)
        starts = np.searchsorted(inverse[order], np.arange(edges.shape[0]))
        edge_faces[:, 0] = face_of_entry[order[starts]]
        two = counts == 2
        edge_faces[two, 1] = face_of_entry[order[starts[two] + 1]]
        self._edge_faces = edge_faces

    @property
    def face_normals(self) -> np.ndarray:
        return self._face_normals

    @property
    def edges(self) -> np.ndarray:
        return self._edges

    @property
    def edge_faces(self) -> np.ndarray:
        return self._edge_faces

    @property
    def interior_edge_mask(self) -> np.ndarray:
        return self._edge_faces[:, 1] >= 0

    @property
    def bbox_diagonal(self) -> float:
        extent = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(extent))

    def dihedral_angles_deg(self) -> np.ndarray:
        """Interior angle in degrees per edge (180 = flat, small = sharp);
        NaN for border edges."""
        angles = np.full(self._edges.shape[0], np.nan)
        interior = self.interior_edge_mask
        n1 = self._face_normals[self._edge_faces[interior, 0]]
        n2 = self._face_normals[self._edge_faces[interior, 1]]
        cos = np.clip((n1 * n2).sum(axis=1), -1.0, 1.0)
        angles[interior] = 180.0 - np.degrees(np.arccos(cos))
        return angles

    def sharp_edge_indices(self, dihedral_threshold_deg: float) -> np.ndarray:
        angles = self.dihedral_angles_deg()
        with np.errstate(invalid="ignore"):
            return np.flatnonzero(angles < dihedral_threshold_deg)

    def mean_edge_length(self) -> float:
        seg = self.vertices[self._edges[:, 1]] - self.vertices[self._edges[:, 0]]
        return float(np.linalg.norm(seg, axis=1).mean())


def _point_triangle_d2(
    points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Exact squared distances (n, f) from points to triangles (a, b, c).

    Region walk over the triangle's Voronoi regions (vertices, edges, face).
    """
    ab = b - a
    ac = c - a
    ap = points[:, None, :] - a[None, :, :]
    d1 = (ab[None] * ap).sum(-1)
    d2 = (ac[None] * ap).sum(-1)
    bp = points[:, None, :] - b[None, :, :]
    d3 = (ab[None] * bp).sum(-1)
    d4 = (ac[None] * bp).sum(-1)
    cp = points[:, None, :] - c[None, :, :]
    d5 = (ab[None] * cp).sum(-1)
    d6 = (ac[None] * cp).sum(-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    shape = d1.shape
    closest = np.empty((*shape, 3))
    done = np.zeros(shape, dtype=bool)

    def settle(mask, value):
        nonlocal done
        fresh = mask & ~done
        closest[fresh] = value if value.ndim == 2 else value[fresh]
        done |= fresh

    def lerp_edge(origin, direction, num, den):
        t = num / np.where(den == 0.0, 1.0, den)
        return origin[None, :, :] + t[:, :, None] * direction[None, :, :]

    settle((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, (*shape, 3)))
    settle((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, (*shape, 3)))
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), lerp_edge(a, ab, d1, d1 - d3))
    settle((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, (*shape, 3)))
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), lerp_edge(a, ac, d2, d2 - d6))
    settle(
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
        lerp_edge(b, c - b, d4 - d3, (d4 - d3) + (d5 - d6)),
    )
    denom = va + vb + vc
    denom = np.where(denom == 0.0, 1.0, denom)
    v = vb / denom
    w = vc / denom
    face_pt = a[None] + v[:, :, None] * ab[None] + w[:, :, None] * ac[None]
    settle(np.ones(shape, dtype=bool), face_pt)

    return ((points[:, None, :] - closest) ** 2).sum(-1)


class _TriangleBVH:
    """Median-split AABB tree over triangles; exact nearest-face queries."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = _BVH_LEAF_SIZE):
        tris = mesh.vertices[mesh.faces]
        self._a = tris[:, 0].copy()
        self._b = tris[:, 1].copy()
        self._c = tris[:, 2].copy()
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        centroids = tris.mean(axis=1)

        self._nodes: list[tuple] = []  # (lo, hi, left, right, start, count)
        self._order = np.arange(mesh.faces.shape[0])

        def build(lo_i: int, hi_i: int) -> int:
            node_id = len(self._nodes)
            self._nodes.append(None)
            sel = self._order[lo_i:hi_i]
            nlo = lo[sel].min(axis=0)
            nhi = hi[sel].max(axis=0)
            if hi_i - lo_i <= leaf_size:
                self._nodes[node_id] = (nlo, nhi, -1, -1, lo_i, hi_i - lo_i)
                return node_id
            axis = int((nhi - nlo).argmax())
            local = np.argsort(centroids[sel, axis], kind="stable")
            self._order[lo_i:hi_i] = sel[local]
            mid = lo_i + (hi_i - lo_i) // 2
            left = build(lo_i, mid)
            right = build(mid, hi_i)
            self._nodes[node_id] = (nlo, nhi, left, right, -1, 0)
            return node_id

        build(0, mesh.faces.shape[0])

    @staticmethod
    def _box_d2(point: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
        gap = np.maximum(np.maximum(lo - point, point - hi), 0.0)
        return float((gap * gap).sum())

    def query(self, point: np.ndarray) -> tuple[float, int]:
        best = np.inf
        best_face = -1
        stack = [0]
        while stack:
            node = self._nodes[stack.pop()]
            if self._box_d2(point, node[0], node[1]) >= best:
                continue
            if node[2] < 0:
                sel = self._order[node[4] : node[4] + node[5]]
                d2 = _point_triangle_d2(
                    point[None, :], self._a[sel], self._b[sel], self._c[sel]
                )[0]
                local = int(d2.argmin())
                if d2[local] < best:
                    best = float(d2[local])
                    best_face = int(sel[local])
            else:
                stack.append(node[2])
                stack.append(node[3])
        return best, best_face


def surface_distances(
    points: np.ndarray, mesh: TriangleMesh
) -> tuple[np.ndarray, np.ndarray]:
    """Exact distance to the mesh surface and the nearest face per point."""
    points = np.asarray(points, dtype=np.float64)
    nf = mesh.faces.shape[0]
    if nf <= _BVH_MIN_FACES:
        tris = mesh.vertices[mesh.faces]
        chunk = max(1, _POINT_CHUNK // nf)
        dist = np.empty(points.shape[0])
        face = np.empty(points.shape[0], dtype=np.int64)
        for start in range(0, points.shape[0], chunk):
            sl = slice(start, start + chunk)
            d2 = _point_triangle_d2(points[sl], tris[:, 0], tris[:, 1], tris[:, 2])
            face[sl] = d2.argmin(axis=1)
            dist[sl] = np.sqrt(np.take_along_axis(d2, face[sl][:, None], axis=1)[:, 0])
        return dist, face
    bvh = _TriangleBVH(mesh)
    out = np.array([bvh.query(p) for p in points])
    return np.sqrt(out[:, 0]), out[:, 1].astype(np.int64)


def dist_to_surface(cloud: PointCloud, mesh: TriangleMesh) -> tuple[np.ndarray, float]:
    """Per-point and mean point-to-mesh distance."""
    dist, _ = surface_distances(cloud.points, mesh)
    return dist, float(dist.mean())


def sample_edges(
    mesh: TriangleMesh,
    n_samples: int,
    dihedral_threshold_deg: float = 120.0,
    falloff_width: float | None = None,
    seed: int = 0,
) -> PointCloud:
    """Sample ground-truth points concentrated on the mesh's sharp edges.

    Edges with interior dihedral angle below the threshold are selected,
    weighted by length times angular deficit. A quarter of the samples land
    on the edge segment itself; the rest fall on the two adjacent faces at a
    perpendicular offset with linearly decreasing density up to falloff_width
    (default twice the mean edge length), clipped to stay on the face.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    sharp = mesh.sharp_edge_indices(dihedral_threshold_deg)
    if sharp.size == 0:
        angles = mesh.dihedral_angles_deg()
        interior = mesh.interior_edge_mask
        if not interior.any():
            raise ValueError("no sharp edges: mesh has no interior edges")
        raise ValueError(
            "no sharp edges: minimum dihedral angle is "
            f"{np.nanmin(angles[interior]):.2f} deg (threshold "
            f"{dihedral_threshold_deg:.2f} deg)"
        )
    if falloff_width is None:
        falloff_width = 2.0 * mesh.mean_edge_length()
    if falloff_width < 0:
        raise ValueError("falloff_width must be non-negative")

    va = mesh.vertices[mesh.edges[sharp, 0]]
    vb = mesh.vertices[mesh.edges[sharp, 1]]
    seg = vb - va
    lengths = np.linalg.norm(seg, axis=1)
    angles = mesh.dihedral_angles_deg()[sharp]
    weights = lengths * (180.0 - angles) / 180.0
    weights /= weights.sum()

    # Per (edge, side): apex vertex, in-face perpendicular, apex height and
    # its parameter along the edge (for clipping samples to the face).
    edge_dir = seg / lengths[:, None]
    apex = np.empty((sharp.size, 2, 3))
    for side in range(2):
        fa = mesh.faces[mesh.edge_faces[sharp, side]]
        on_edge = (fa[:, :, None] == mesh.edges[sharp][:, None, :]).any(axis=2)
        apex[:, side, :] = mesh.vertices[fa[~on_edge]]
    u = apex - va[:, None, :]
    t_c = (u * edge_dir[:, None, :]).sum(-1) / lengths[:, None]
    perp = u - (u * edge_dir[:, None, :]).sum(-1)[:, :, None] * edge_dir[:, None, :]
    height = np.linalg.norm(perp, axis=2)
    perp_unit = perp / height[:, :, None]

    rng = np.random.default_rng(seed)
    pick = rng.choice(sharp.size, size=n_samples, p=weights)
    t = rng.random(n_samples)
    side = rng.integers(0, 2, size=n_samples)
    on_edge = rng.random(n_samples) < 0.25
    offset = falloff_width * (1.0 - np.sqrt(rng.random(n_samples)))
    offset[on_edge] = 0.0

    tc = t_c[pick, side]
    h = height[pick, side]
    with np.errstate(divide="ignore", invalid="ignore"):
        lim_a = np.where(tc > 0, t / tc, np.inf)
        lim_b = np.where(tc < 1, (1.0 - t) / (1.0 - tc), np.inf)
    s_max = h * np.minimum(lim_a, lim_b)
    offset = np.minimum(offset, s_max)

    base = va[pick] + t[:, None] * seg[pick]
    points = base + offset[:, None] * perp_unit[pick, side]
    return PointCloud(points)


def f_score(
    predicted: PointCloud, gt_samples: PointCloud, tau: float
) -> tuple[float, float, float]:
    """Precision, recall and F-score (percent) at distance threshold tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    tau2 = tau * tau
    _, d2p = KnnIndex(gt_samples.points).query_batch(predicted.points, 1)
    _, d2r = KnnIndex(predicted.points).query_batch(gt_samples.points, 1)
    precision = 100.0 * float((d2p[:, 0] <= tau2).mean())
    recall = 100.0 * float((d2r[:, 0] <= tau2).mean())
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def density_iqr(cloud: PointCloud, k: int = 8) -> float:
    """75th minus 25th percentile (linear interpolation) of the density proxy."""
    values = density_proxy(cloud, k).values
    lo, hi = np.percentile(values, [25.0, 75.0])
    return float(hi - lo)


def point_segment_distances(
    points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray
) -> np.ndarray:
    """Distance (n,) from each point to the nearest of the given segments."""
    seg = seg_b - seg_a
    seg_len2 = (seg * seg).sum(axis=1)
    best = np.full(points.shape[0], np.inf)
    chunk = max(1, _POINT_CHUNK // seg_a.shape[0])
    for start in range(0, points.shape[0], chunk):
        p = points[start : start + chunk]
        ap = p[:, None, :] - seg_a[None, :, :]
        t = np.clip((ap * seg[None]).sum(-1) / seg_len2[None, :], 0.0, 1.0)
        closest = seg_a[None] + t[:, :, None] * seg[None]
        d2 = ((p[:, None, :] - closest) ** 2).sum(-1)
        best[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return best


def normal_error_sharp(
    cloud: PointCloud,
    mesh: TriangleMesh,
    tau: float,
    dihedral_threshold_deg: float = 120.0,
) -> float:
    """Median unsigned angle (degrees) between the cloud's normals and the
    nearest face normal, over the points within tau of a sharp mesh edge."""
    if cloud.normals is None:
        raise ValueError("cloud has no normals; estimate them first")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sharp = mesh.sharp_edge_indices(dihedral_threshold_deg)
    if sharp.size == 0:
        raise ValueError("mesh has no sharp edges under the given threshold")
    seg_a = mesh.vertices[mesh.edges[sharp, 0]]
    seg_b = mesh.vertices[mesh.edges[sharp, 1]]
    edge_dist = point_segment_distances(cloud.points, seg_a, seg_b)
    region = edge_dist <= tau
    if not region.any():
        raise ValueError(f"no cloud points within tau={tau} of a sharp edge")
    _, faces = surface_distances(cloud.points[region], mesh)
    face_n = mesh.face_normals[faces]
    dots = np.abs((cloud.normals[region] * face_n).sum(axis=1))
    errors = np.degrees(np.arccos(np.clip(dots, 0.0, 1.0)))
    return float(np.median(errors))


@dataclass
class EvalReport:
    """One evaluation run; unset metrics stay None. Parameters used to
    produce the metrics are embedded for provenance."""

    tau: float | None = None
    precision: float | None = None
    recall: float | None = None
    f_score: float | None = None
    density_iqr: float | None = None
    normal_error_median_deg: float | None = None
    mean_dist_to_surface: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = [self.precision, self.recall, self.f_score]
        if any(s is not None for s in scores):
            if any(s is None for s in scores):
                raise ValueError("precision, recall and f_score must be set together")
            for s in scores:
                if not 0.0 <= s <= 100.0:
                    raise ValueError("scores must lie in [0, 100]")
            p, r = self.precision, self.recall
            expect = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
            if abs(expect - self.f_score) > 1e-9:
                raise ValueError("f_score inconsistent with precision/recall")

    def to_json(self, indent: int = 2) -> str:
        payload = {
            k: v
            for k, v in self.__dict__.items()
            if v is not None and (k != "params" or v)
        }
        return json.dumps(payload, indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))
