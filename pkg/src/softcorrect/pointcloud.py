"""Point clouds, the observation filtering chain and cloud-to-cloud distances."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, EmptyResultError


class PointCloud:
    """Immutable set of 3D points with a lazily built KD-tree."""

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        self._points = pts
        self._tree = None
        self._lock = threading.Lock()

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)})"

    def __getstate__(self):
        return {"points": self._points}

    def __setstate__(self, state):
        self.__init__(state["points"])

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            with self._lock:
                if self._tree is None:
                    self._tree = cKDTree(self._points)
        return self._tree

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point of this cloud for every query: ``(distances, indices)``.

        Distances are recomputed from the matched points so they are
        bit-identical to a brute-force evaluation of the same pair.
        """
        q = np.asarray(queries, float).reshape(-1, 3)
        if len(self) == 0:
            raise ValueError("nearest-neighbour query on an empty cloud")
        _, idx = self.tree.query(q)
        return point_distances(q, self._points[idx]), idx

    def transformed(self, rotation, translation) -> "PointCloud":
        return PointCloud(self._points @ np.asarray(rotation).T + np.asarray(translation))


def point_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(np.sum(d * d, axis=-1))


def _as_cloud(c) -> PointCloud:
    return c if isinstance(c, PointCloud) else PointCloud(c)


def chamfer_one_directional(observed, reference) -> float:
    """Mean distance from each observed point to its nearest reference point."""
    observed, reference = _as_cloud(observed), _as_cloud(reference)
    if len(observed) == 0 or len(reference) == 0:
        raise ValueError("Chamfer distance of an empty cloud")
    d, _ = reference.nearest(observed.points)
    return float(np.mean(d))


def hausdorff(a, b) -> float:
    """Largest nearest-neighbour distance from ``a`` to ``b`` (one direction only)."""
    a, b = _as_cloud(a), _as_cloud(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Hausdorff distance of an empty cloud")
    d, _ = b.nearest(a.points)
    return float(np.max(d))


@dataclass(frozen=True)
class FilterConfig:
    crop_min: tuple[float, float, float] = (-np.inf, -np.inf, -np.inf)
    crop_max: tuple[float, float, float] = (np.inf, np.inf, np.inf)
    exclusion_spheres: Sequence[tuple[tuple[float, float, float], float]] = field(default_factory=tuple)
    outlier_k: int = 20
    outlier_stddev: float = 1.0
    target_density: float = 16.5  # points per mm^2

    def __post_init__(self):
        if np.any(np.asarray(self.crop_min) >= np.asarray(self.crop_max)):
            raise ConfigurationError("crop box is empty")
        if self.outlier_k < 1:
            raise ConfigurationError("outlier_k must be >= 1")
        if self.target_density <= 0:
            raise ConfigurationError("target_density must be positive")


def remove_statistical_outliers(points: np.ndarray, k: int, stddev: float) -> np.ndarray:
    """Keep points whose mean k-NN distance is within ``mean + stddev * sigma``."""
    if len(points) < 2:
        return points
    k = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    limit = mean_d.mean() + stddev * mean_d.std()
    return points[mean_d <= limit]


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One point per occupied voxel: the one closest to the voxel centre."""
    if len(points) == 0:
        return points
    cell = np.floor(points / voxel).astype(np.int64)
    centre_dist = np.linalg.norm(points - (cell + 0.5) * voxel, axis=1)
    order = np.lexsort((centre_dist, cell[:, 2], cell[:, 1], cell[:, 0]))
    c = cell[order]
    first = np.ones(len(c), bool)
    first[1:] = np.any(c[1:] != c[:-1], axis=1)
    return points[np.sort(order[first])]


def filter_cloud(cloud, cfg: FilterConfig) -> PointCloud:
    pts = _as_cloud(cloud).points
    keep = np.all((pts >= np.asarray(cfg.crop_min)) & (pts <= np.asarray(cfg.crop_max)), axis=1)
    for centre, radius in cfg.exclusion_spheres:
        keep &= np.linalg.norm(pts - np.asarray(centre, float), axis=1) > radius
    pts = pts[keep]
    pts = remove_statistical_outliers(pts, cfg.outlier_k, cfg.outlier_stddev)
    # voxel edge so that a surface patch keeps ~target_density points per mm^2
    pts = voxel_downsample(pts, 1.0 / np.sqrt(cfg.target_density))
    if len(pts) == 0:
        raise EmptyResultError("filtering removed every point")
    return PointCloud(pts)


def read_cloud(path) -> PointCloud:
    """Read ASCII ``x y z`` rows, with or without an ASCII PLY header."""
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].strip() == "ply":
        end = next(i for i, ln in enumerate(lines) if ln.strip() == "end_header")
        lines = lines[end + 1:]
    rows = [ln.split()[:3] for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return PointCloud(np.array(rows, dtype=float).reshape(-1, 3))


def write_cloud(path, cloud, ply: bool = False) -> None:
    pts = _as_cloud(cloud).points
    with open(path, "w") as fh:
        if ply:
            fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(pts)}\n")
            fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        np.savetxt(fh, pts, fmt="%.17g")
