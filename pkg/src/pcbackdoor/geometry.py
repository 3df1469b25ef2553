"""Geometric kernels shared by the trigger, defense and dataset code.

Point clouds are ``(K, 3)`` float64 arrays. Randomness is always passed in
as a ``numpy.random.Generator``; nothing here touches global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class DegenerateGeometryError(ValueError):
    """Raised when a cloud or mesh has no extent (coincident points, zero area)."""


def as_cloud(points) -> np.ndarray:
    """Validate and convert ``points`` to a contiguous ``(K, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected a (K, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative ints.

    Philox gives the same stream on every platform for the same key, which is
    what lets per-sample / per-epoch streams be derived instead of threaded.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _check_angle(angle: float) -> float:
    angle = float(angle)
    if not math.isfinite(angle):
        raise ValueError(f"rotation angle must be finite, got {angle}")
    return angle


def rotation_matrix_axis(axis: str, angle: float) -> np.ndarray:
    """Right-handed rotation by ``angle`` radians about a coordinate axis."""
    angle = _check_angle(angle)
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"axis must be one of 'x', 'y', 'z', got {axis!r}")


def composed_rotation(angle: float) -> np.ndarray:
    """``R_x(angle) @ R_y(angle) @ R_z(angle)``: the same angle about all three axes."""
    return euler_xyz(angle, angle, angle)


def euler_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    return rotation_matrix_axis("x", ax) @ rotation_matrix_axis("y", ay) @ rotation_matrix_axis("z", az)


def normalize_unit_ball(cloud) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if not radius > 0.0:
        raise DegenerateGeometryError("cannot normalize a cloud whose points all coincide")
    return centered / radius


def k_nearest_distances(cloud, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    k = int(k)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < K (K={n}), got k={k}")
    # k + 1 because every point is its own nearest neighbour at distance 0.
    dist, idx = cKDTree(pts).query(pts, k=k + 1)
    # Drop the self match explicitly; with duplicate points the self entry is
    # not guaranteed to come first.
    self_hit = idx == np.arange(n)[:, None]
    has_self = self_hit.any(axis=1)
    keep = ~self_hit
    keep[~has_self, -1] = False
    neigh = dist[keep].reshape(n, k)
    return neigh.mean(axis=1)


def farthest_point_sampling(cloud, n_samples: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Returns ``n_samples`` indices. The first is ``start``; each later one
    maximizes the distance to the nearest already-selected point, with ties
    going to the lowest index.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    n_samples = int(n_samples)
    start = int(start)
    if not 1 <= n_samples <= n:
        raise ValueError(f"number of samples must be in [1, {n}], got {n_samples}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = start
    min_dist = np.sqrt(((pts - pts[start]) ** 2).sum(axis=1))
    for i in range(1, n_samples):
        nxt = int(np.argmax(min_dist))  # argmax returns the first maximum
        chosen[i] = nxt
        np.minimum(min_dist, np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1)), out=min_dist)
    return chosen


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range for vertex count")

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def sample_mesh_surface(mesh: TriangleMesh, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted sampling of ``n_points`` points on a triangle mesh."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateGeometryError("mesh has zero total surface area")
    # zero-area faces get probability 0 and are never picked
    face_idx = rng.choice(len(areas), size=int(n_points), p=areas / total)
    r1 = np.sqrt(rng.random(int(n_points)))
    r2 = rng.random(int(n_points))
    tri = mesh.vertices[mesh.faces[face_idx]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
