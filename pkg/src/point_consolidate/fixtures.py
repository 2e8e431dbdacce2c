"""Deterministic synthetic fixtures with known ground truth.

These ship in the package (not just the tests) so acceptance runs and CLI
demos need no external data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .metrics import TriangleMesh, point_segment_distances

FIXTURE_KINDS = (
    "cube_missing_edges",
    "two_density_sphere",
    "noisy_cube",
    "dihedral_wedge",
    "grid",
)


@dataclass
class Fixture:
    cloud: PointCloud
    mesh: TriangleMesh | None = None
    info: dict = field(default_factory=dict)


def cube_mesh(side: float = 1.0) -> TriangleMesh:
    """Axis-aligned cube centered at the origin, 12 triangles, outward winding."""
    h = side / 2.0
    verts = np.array(
        [
            [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
            [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
        ]
    )
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # z = -h
            [4, 5, 6], [4, 6, 7],  # z = +h
            [0, 1, 5], [0, 5, 4],  # y = -h
            [2, 3, 7], [2, 7, 6],  # y = +h
            [1, 2, 6], [1, 6, 5],  # x = +h
            [0, 4, 7], [0, 7, 3],  # x = -h
        ],
        dtype=np.int64,
    )
    return TriangleMesh(verts, faces)


def cube_edge_segments(side: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Endpoints of the cube's 12 edges as two (12, 3) arrays."""
    mesh = cube_mesh(side)
    sharp = mesh.sharp_edge_indices(120.0)
    return (
        mesh.vertices[mesh.edges[sharp, 0]],
        mesh.vertices[mesh.edges[sharp, 1]],
    )


def _sample_cube_surface(n: int, side: float, rng: np.random.Generator) -> np.ndarray:
    h = side / 2.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-h, h, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2  # fixed coordinate
    sign = np.where(face % 2 == 0, -h, h)
    free = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    pts[np.arange(n), axis] = sign
    pts[np.arange(n), free[:, 0]] = uv[:, 0]
    pts[np.arange(n), free[:, 1]] = uv[:, 1]
    return pts


def _sphere_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    vec = rng.normal(size=(n, 3))
    norms = np.linalg.norm(vec, axis=1)
    # Resample the (measure-zero) degenerate draws.
    while (norms < 1e-12).any():
        bad = norms < 1e-12
        vec[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(vec, axis=1)
    return vec / norms[:, None]


def make_fixture(kind: str, seed: int = 0, **params) -> Fixture:
    """Build one of the named fixtures; see FIXTURE_KINDS."""
    builders = {
        "cube_missing_edges": _make_cube_missing_edges,
        "two_density_sphere": _make_two_density_sphere,
        "noisy_cube": _make_noisy_cube,
        "dihedral_wedge": _make_dihedral_wedge,
        "grid": _make_grid,
    }
    if kind not in builders:
        raise ValueError(f"unknown fixture kind '{kind}' (choose from {FIXTURE_KINDS})")
    return builders[kind](seed=seed, **params)


def _make_cube_missing_edges(
    seed: int = 0,
    n: int = 30_000,
    side: float = 1.0,
    band_width: float = 0.04,
    masked_edge_count: int = 4,
) -> Fixture:
    """Uniform cube-surface samples with a band around a few edges left empty."""
    rng = np.random.default_rng(seed)
    seg_a, seg_b = cube_edge_segments(side)
    masked = rng.choice(len(seg_a), size=min(masked_edge_count, len(seg_a)), replace=False)
    masked = np.sort(masked)

    collected: list[np.ndarray] = []
    total = 0
    while total < n:
        batch = _sample_cube_surface(max(n - total, 1024), side, rng)
        dist = point_segment_distances(batch, seg_a[masked], seg_b[masked])
        keep = batch[dist > band_width]
        collected.append(keep)
        total += keep.shape[0]
    points = np.vstack(collected)[:n]
    return Fixture(
        cloud=PointCloud(points),
        mesh=cube_mesh(side),
        info={
            "masked_edges": masked.tolist(),
            "masked_seg_a": seg_a[masked].tolist(),
            "masked_seg_b": seg_b[masked].tolist(),
            "band_width": band_width,
            "side": side,
        },
    )


def _make_two_density_sphere(
    seed: int = 0,
    n: int = 12_000,
    radius: float = 0.5,
    density_ratio: float = 10.0,
) -> Fixture:
    """Sphere sampled uniformly per hemisphere, the z>0 side `density_ratio`
    times denser than the z<0 side."""
    if density_ratio < 1.0:
        raise ValueError("density_ratio must be at least 1")
    rng = np.random.default_rng(seed)
    n_dense = int(round(n * density_ratio / (density_ratio + 1.0)))
    n_sparse = n - n_dense

    def hemisphere(count: int, sign: float) -> np.ndarray:
        dirs = _sphere_directions(count, rng)
        dirs[:, 2] = sign * np.abs(dirs[:, 2])
        return radius * dirs

    points = np.vstack([hemisphere(n_dense, +1.0), hemisphere(n_sparse, -1.0)])
    return Fixture(
        cloud=PointCloud(points),
        info={
            "radius": radius,
            "density_ratio": density_ratio,
            "n_dense": n_dense,
            "n_sparse": n_sparse,
        },
    )


def _make_noisy_cube(
    seed: int = 0,
    n: int = 16_000,
    side: float = 1.0,
    sigma_fraction: float = 0.01,
) -> Fixture:
    """Cube-surface samples with isotropic Gaussian noise of standard deviation
    sigma_fraction times the bbox diagonal."""
    rng = np.random.default_rng(seed)
    clean = _sample_cube_surface(n, side, rng)
    sigma = sigma_fraction * float(np.sqrt(3.0)) * side
    noisy = clean + rng.normal(scale=sigma, size=(n, 3))
    return Fixture(
        cloud=PointCloud(noisy),
        mesh=cube_mesh(side),
        info={"sigma": sigma, "sigma_fraction": sigma_fraction, "clean": clean.tolist()},
    )


def _make_dihedral_wedge(
    seed: int = 0,
    n: int = 8_000,
    angle_deg: float = 90.0,
    extent: float = 1.0,
) -> Fixture:
    """Two rectangular faces meeting along the z-axis at the given interior
    angle, sampled uniformly (half the points per face)."""
    if not 0.0 < angle_deg < 180.0:
        raise ValueError("angle_deg must lie in (0, 180)")
    rng = np.random.default_rng(seed)
    theta = np.radians(angle_deg)
    dir_a = np.array([1.0, 0.0, 0.0])
    dir_b = np.array([np.cos(theta), np.sin(theta), 0.0])

    n_a = n // 2
    u = rng.uniform(0.0, extent, size=(n, 2))
    points = np.empty((n, 3))
    points[:n_a] = u[:n_a, 0, None] * dir_a
    points[n_a:] = u[n_a:, 0, None] * dir_b
    points[:, 2] = u[:, 1]

    verts = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, extent],
            extent * dir_a,
            extent * dir_a + [0.0, 0.0, extent],
            extent * dir_b,
            extent * dir_b + [0.0, 0.0, extent],
        ]
    )
    faces = np.array([[0, 2, 3], [0, 3, 1], [0, 1, 5], [0, 5, 4]], dtype=np.int64)
    return Fixture(
        cloud=PointCloud(points),
        mesh=TriangleMesh(verts, faces),
        info={
            "angle_deg": angle_deg,
            "crease_a": [0.0, 0.0, 0.0],
            "crease_b": [0.0, 0.0, extent],
            "extent": extent,
        },
    )


def _make_grid(seed: int = 0, n_side: int = 20, spacing: float = 0.25) -> Fixture:
    """Cubic lattice of n_side^3 points with the given spacing."""
    del seed  # fully deterministic
    coords = np.arange(n_side, dtype=np.float64) * spacing
    x, y, z = np.meshgrid(coords, coords, coords, indexing="ij")
    points = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return Fixture(
        cloud=PointCloud(points),
        info={"n_side": n_side, "spacing": spacing},
    )
