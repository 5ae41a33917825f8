"""Rigid registration: corresponded least-squares fit and point-to-point ICP."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RankError, RegistrationError
from .pointcloud import PointCloud, point_distances


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform applying ``first`` and then ``self``."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def as_row_major(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    @classmethod
    def from_row_major(cls, values) -> "RigidTransform":
        m = np.asarray(values, float).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def fit_rigid(source, target) -> RigidTransform:
    """Least-squares rigid transform taking ``source`` onto ``target`` (Kabsch)."""
    src = np.asarray(source, float).reshape(-1, 3)
    dst = np.asarray(target, float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"correspondence length mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise RankError("need at least 3 correspondences")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise RankError("correspondences are collinear or coincident")
    U, _, Vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6  # mm change in mean residual
    max_correspondence_dist: float = 10.0
    initial: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.max_iterations < 1 or not self.convergence_tol > 0 or not self.max_correspondence_dist > 0:
            raise ConfigurationError("ICP iterations, tolerance and correspondence distance must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    mean_residual: float
    iterations: int
    history: list

    def __iter__(self):
        return iter((self.transform, self.mean_residual, self.iterations))


def icp_register(source, target, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Align ``source`` to ``target``; the result includes ``cfg.initial``.

    The residual is the root-mean-square correspondence distance, the quantity
    each fit minimizes, so it never increases while every point stays within
    range. ``history`` holds it at the start of every iteration plus the final one.
    """
    src = source if isinstance(source, PointCloud) else PointCloud(source)
    tgt = target if isinstance(target, PointCloud) else PointCloud(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty clouds")
    T = cfg.initial
    history = []
    prev = None
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = T.apply(src.points)
        d, idx = tgt.nearest(moved)
        keep = d <= cfg.max_correspondence_dist
        if keep.sum() < 3:
            raise RegistrationError(f"fewer than 3 correspondences within {cfg.max_correspondence_dist} mm at iteration {it}")
        mean = float(np.sqrt(np.mean(d[keep] ** 2)))
        history.append(mean)
        if mean == 0.0 or (prev is not None and abs(prev - mean) < cfg.convergence_tol):
            return IcpResult(T, mean, it, history)
        prev = mean
        try:
            step = fit_rigid(moved[keep], tgt.points[idx[keep]])
        except RankError as exc:
            raise RegistrationError(f"degenerate correspondences at iteration {it}") from exc
        T = step.compose(T)
    d, _ = tgt.nearest(T.apply(src.points))
    keep = d <= cfg.max_correspondence_dist
    mean = float(np.sqrt(np.mean(d[keep] ** 2))) if keep.any() else float("inf")
    history.append(mean)
    return IcpResult(T, mean, it, history)


def read_correspondences(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "")
        if header != "sx,sy,sz,tx,ty,tz":
            raise ValueError(f"{path}: expected header 'sx,sy,sz,tx,ty,tz'")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return data[:, :3], data[:, 3:6]


def write_correspondences(path, source, target) -> None:
    np.savetxt(path, np.hstack([source, target]), delimiter=",", header="sx,sy,sz,tx,ty,tz", comments="", fmt="%.17g")


def write_transform(path, T: RigidTransform) -> None:
    Path(path).write_text(" ".join(f"{v:.17g}" for v in T.as_row_major()) + "\n")


def read_transform(path) -> RigidTransform:
    vals = Path(path).read_text().split()
    if len(vals) != 12:
        raise ValueError(f"{path}: a transform file holds 12 numbers, found {len(vals)}")
    return RigidTransform.from_row_major([float(v) for v in vals])


def mean_point_error(T: RigidTransform, source, target) -> float:
    return float(point_distances(T.apply(source), np.asarray(target, float)).mean())
