"""Two-stage Young's modulus grid search with on-disk caching of replays."""
from __future__ import annotations

import hashlib
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .correction import LOSS_FACTOR
from .errors import SearchError
from .fem import MaterialParams, ProbeSphere, ReplayResult, SolverConfig, read_run, run_replay, write_run
from .mesh import TetMesh
from .pointcloud import chamfer_one_directional
from .replay import FrameSchedule, KinematicsTrajectory

WORKERS_ENV = "SOFTCORRECT_WORKERS"


class NonConvexWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SearchSpec:
    coarse_values: tuple = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
    fine_multipliers: tuple = (2.5, 5.0, 7.5)  # per decade either side of the coarse optimum
    sample_factor: int = LOSS_FACTOR

    def __post_init__(self):
        v = np.asarray(self.coarse_values, float)
        if len(v) == 0 or np.any(v <= 0) or np.any(np.diff(v) <= 0):
            raise SearchError("coarse values must be positive and strictly increasing")
        m = np.asarray(self.fine_multipliers, float)
        if np.any(m <= 1) or np.any(m >= 10) or np.any(np.diff(m) <= 0):
            raise SearchError("fine multipliers must be increasing and lie in (1, 10)")


@dataclass
class SearchScene:
    mesh: TetMesh
    material: MaterialParams  # everything but E
    solver: SolverConfig
    probe: ProbeSphere
    trajectory: KinematicsTrajectory
    schedule: FrameSchedule
    clouds: list  # registered observations, one per frame (None = missing)


@dataclass
class SearchEntry:
    modulus: float
    mean_distance: Optional[float]  # None when the run diverged
    frames_used: int
    diverged_at_frame: Optional[int]
    stage: str = "coarse"

    @property
    def finite(self) -> bool:
        return self.mean_distance is not None and math.isfinite(self.mean_distance)


@dataclass
class SearchResult:
    coarse: list
    fine: list = field(default_factory=list)
    selected: Optional[float] = None
    warnings: list = field(default_factory=list)


def e_label(value: float) -> str:
    """Compact label in the style 1e1, 2.5e3."""
    exp = int(math.floor(math.log10(value) + 1e-12))
    mant = value / 10 ** exp
    m = f"{mant:.4g}"
    return f"{m}e{exp}"


def run_key(scene: SearchScene, material: MaterialParams) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(scene.mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(scene.mesh.tets).tobytes())
    h.update(repr(asdict(material)).encode())
    h.update(repr(asdict(scene.solver)).encode())
    probe = asdict(scene.probe)
    probe.pop("center", None)
    h.update(repr(probe).encode())
    h.update(scene.trajectory.times.tobytes())
    h.update(scene.trajectory.positions.tobytes())
    h.update(np.asarray(scene.schedule.frame_times, float).tobytes())
    return h.hexdigest()[:20]


def simulate_cached(scene: SearchScene, modulus: float, cache_dir=None) -> ReplayResult:
    material = replace(scene.material, young_modulus=float(modulus))
    if cache_dir is not None:
        path = Path(cache_dir) / run_key(scene, material)
        if (path / "run_meta").exists():
            return read_run(path)
    result = run_replay(scene.mesh, material, scene.solver, scene.probe, scene.trajectory, scene.schedule)
    if cache_dir is not None:
        write_run(result, path)
    return result


def score_run(mesh: TetMesh, run: ReplayResult, clouds: Sequence, modulus: float, factor: int = LOSS_FACTOR,
              stage: str = "coarse") -> SearchEntry:
    """Mean one-directional Chamfer from each cloud to the super-sampled frame."""
    if run.diverged:
        return SearchEntry(float(modulus), None, 0, run.diverged_at_frame, stage)
    sampler = mesh.sampler(factor)
    dists = [chamfer_one_directional(c, sampler.sample(p))
             for p, c in zip(run.positions, clouds) if p is not None and c is not None and len(c) > 0]
    if not dists:
        raise SearchError("no frame has both a simulated mesh and an observation")
    return SearchEntry(float(modulus), float(np.mean(dists)), len(dists), None, stage)


def _evaluate(args):
    scene, modulus, cache_dir, factor, stage = args
    return score_run(scene.mesh, simulate_cached(scene, modulus, cache_dir), scene.clouds, modulus, factor, stage)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def evaluate_moduli(scene: SearchScene, values: Sequence[float], cache_dir=None, factor: int = LOSS_FACTOR,
                    stage: str = "coarse", workers: Optional[int] = None) -> list:
    jobs = [(scene, float(v), cache_dir, factor, stage) for v in sorted(values)]
    n = worker_count() if workers is None else workers
    if n <= 1 or len(jobs) <= 1:
        return [_evaluate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_evaluate, jobs))


def coarse_search(spec: SearchSpec, scene: SearchScene, cache_dir=None, workers: Optional[int] = None) -> list:
    table = evaluate_moduli(scene, spec.coarse_values, cache_dir, spec.sample_factor, "coarse", workers)
    if not any(e.finite for e in table):
        raise SearchError("every coarse run diverged")
    return table


def fine_values(best: float, multipliers: Sequence[float]) -> list:
    """Paper-style subdivisions of the decades below and above ``best``."""
    j = int(round(math.log10(best)))
    vals = [m * 10.0 ** e for e in (j - 1, j) for m in multipliers]
    return sorted(float(f"{v:.12g}") for v in vals)


def landscape_warnings(table: Sequence[SearchEntry]) -> list:
    msgs = []
    na = [e_label(e.modulus) for e in table if not e.finite]
    if na:
        msgs.append(f"diverged (N/A): {', '.join(na)}")
    vals = [e.mean_distance for e in table if e.finite]
    if len(vals) == 1:
        msgs.append("only one finite entry in the fine table")
    elif len(vals) > 2:
        k = int(np.argmin(vals))
        left, right = np.diff(vals[: k + 1]), np.diff(vals[k:])
        if np.any(left > 0) or np.any(right < 0):
            msgs.append("fine landscape is non-monotone around the minimum (non-convex)")
    return msgs


def fine_search(spec: SearchSpec, coarse: Sequence[SearchEntry], scene: SearchScene, cache_dir=None,
                workers: Optional[int] = None) -> SearchResult:
    finite = [e for e in coarse if e.finite]
    if not finite:
        raise SearchError("coarse table has no finite entry")
    best = min(finite, key=lambda e: e.mean_distance)
    fine = evaluate_moduli(scene, fine_values(best.modulus, spec.fine_multipliers), cache_dir,
                           spec.sample_factor, "fine", workers)
    result = SearchResult(list(coarse), fine)
    ok = [e for e in fine if e.finite]
    result.warnings = landscape_warnings(fine)
    if ok:
        result.selected = min(ok, key=lambda e: e.mean_distance).modulus
    else:
        result.selected = best.modulus
        result.warnings.append("every fine run diverged; keeping the coarse optimum")
    for w in result.warnings:
        warnings.warn(w, NonConvexWarning, stacklevel=2)
    return result


def run_search(spec: SearchSpec, scene: SearchScene, cache_dir=None, workers: Optional[int] = None) -> SearchResult:
    return fine_search(spec, coarse_search(spec, scene, cache_dir, workers), scene, cache_dir, workers)


# reporting ---------------------------------------------------------------------------------

def format_table(entries: Sequence[SearchEntry]) -> str:
    """Two-row aligned table: moduli over mean distances (N/A for diverged runs)."""
    heads = [e_label(e.modulus) for e in entries]
    vals = [f"{e.mean_distance:.4f}" if e.finite else "N/A" for e in entries]
    widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
    row = lambda cells: " | ".join(c.center(w) for c, w in zip(cells, widths))
    return "\n".join([row(heads), "-+-".join("-" * w for w in widths), row(vals)])


def format_report(result: SearchResult) -> str:
    parts = ["Coarse search (mean distance, mm)", format_table(result.coarse)]
    if result.fine:
        parts += ["", "Fine search (mean distance, mm)", format_table(result.fine)]
    if result.selected is not None:
        parts += ["", f"selected E = {e_label(result.selected)} Pa"]
    parts += [f"warning: {w}" for w in result.warnings]
    return "\n".join(parts) + "\n"


def write_report(result: SearchResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "search_report.csv"
    with open(csv, "w") as fh:
        fh.write("E,mean_distance_mm,frames_used,diverged_at_frame,stage\n")
        for e in list(result.coarse) + list(result.fine):
            d = f"{e.mean_distance:.6f}" if e.finite else "NA"
            div = "" if e.diverged_at_frame is None else str(e.diverged_at_frame)
            fh.write(f"{e.modulus:g},{d},{e.frames_used},{div},{e.stage}\n")
    txt = out / "search_report.txt"
    txt.write_text(format_report(result))
    return csv, txt


def read_report(path) -> list:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:4] != ["E", "mean_distance_mm", "frames_used", "diverged_at_frame"]:
            raise SearchError(f"{path}: not a search report")
        for line in fh:
            E, d, n, div, stage = (line.rstrip("\n").split(",") + [""])[:5]
            rows.append(SearchEntry(float(E), None if d == "NA" else float(d), int(n),
                                    int(div) if div else None, stage or "coarse"))
    return rows
