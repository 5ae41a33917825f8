"""Time-stamped probe trajectories: subsampling to camera frames and interpolation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class KinematicsTrajectory:
    times: np.ndarray  # (N,) seconds, strictly increasing
    positions: np.ndarray  # (N, 3) mm

    def __post_init__(self):
        t = np.array(self.times, dtype=float).ravel()
        p = np.array(self.positions, dtype=float).reshape(-1, 3)
        if len(t) != len(p):
            raise ValueError("times and positions differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    def interpolate(self, t: float) -> np.ndarray:
        return interpolate(self, t)


@dataclass(frozen=True)
class FrameSchedule:
    frame_times: tuple[float, ...]
    frame_rate: float = 30.0

    def __post_init__(self):
        if np.any(np.diff(self.frame_times) <= 0):
            raise ValueError("frame times must be strictly increasing")

    @classmethod
    def from_trajectory(cls, traj: KinematicsTrajectory, rate: float = 30.0) -> "FrameSchedule":
        return cls(tuple(float(t) for t in traj.times), rate)

    def __len__(self) -> int:
        return len(self.frame_times)


def interpolate(traj: KinematicsTrajectory, t: float) -> np.ndarray:
    """Piecewise-linear position at ``t``, clamped to the end samples outside the span."""
    times, pos = traj.times, traj.positions
    if len(times) == 0:
        raise ValueError("empty trajectory")
    if t <= times[0]:
        return pos[0].copy()
    if t >= times[-1]:
        return pos[-1].copy()
    i = int(np.searchsorted(times, t, side="right")) - 1
    w = (t - times[i]) / (times[i + 1] - times[i])
    return (1.0 - w) * pos[i] + w * pos[i + 1]


def subsample_to_frames(traj: KinematicsTrajectory, rate: float = 30.0) -> KinematicsTrajectory:
    """Nearest-sample resampling onto the frame clock ``t0 + k / rate``."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    t0 = traj.times[0]
    # guard against span * rate landing a hair below an integer
    n = int(np.floor(traj.span * rate + 1e-9)) + 1
    frames = t0 + np.arange(n) / rate
    right = np.clip(np.searchsorted(traj.times, frames), 1, max(len(traj) - 1, 1))
    left = right - 1
    if len(traj) == 1:
        idx = np.zeros(n, int)
    else:
        idx = np.where(frames - traj.times[left] <= traj.times[right] - frames, left, right)
    return KinematicsTrajectory(frames, traj.positions[idx])


def read_trajectory(path) -> KinematicsTrajectory:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().replace(" ", "")
        if header != "t,x,y,z":
            raise ValueError(f"{path}: expected header 't,x,y,z', got {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return KinematicsTrajectory(np.zeros(0), np.zeros((0, 3)))
    return KinematicsTrajectory(data[:, 0], data[:, 1:4])


def write_trajectory(path, traj: KinematicsTrajectory) -> None:
    data = np.column_stack([traj.times, traj.positions])
    np.savetxt(path, data, delimiter=",", header="t,x,y,z", comments="", fmt="%.17g")
