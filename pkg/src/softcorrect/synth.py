"""Synthetic stand-in for the phantom rig: probe scripts, truth replays and depth-camera clouds."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, GenerationError, ScriptError
from .fem import GRAVITY, MaterialParams, ProbeSphere, ReplayResult, SolverConfig, read_run, run_replay, write_run
from .mesh import TetMesh
from .pointcloud import PointCloud, read_cloud, write_cloud
from .registration import RigidTransform, fit_rigid, read_transform, rotation_about, write_transform
from .replay import FrameSchedule, KinematicsTrajectory, read_trajectory, subsample_to_frames, write_trajectory

MAX_SUPERSAMPLE = 32


def default_camera() -> RigidTransform:
    """Oblique overhead camera about 250 mm above the phantom, tilted 30 degrees."""
    R = rotation_about([1.0, 0.0, 0.0], np.pi - np.radians(30.0))
    centre = np.array([34.35, 17.9, 39.3])
    eye = centre + np.array([0.0, -125.0, 216.5])
    # camera coordinates: x right, y down, z along the view ray
    return RigidTransform(R, -R @ eye)


@dataclass(frozen=True)
class SceneTruth:
    true_material: MaterialParams = field(default_factory=MaterialParams)
    camera_transform: RigidTransform = field(default_factory=default_camera)  # sim -> camera
    noise_sigma: float = 2.0  # mm
    density: float = 16.5  # points per mm^2 of top surface
    occlusion_radius: float = 5.0  # mm around the probe axis
    gravity: bool = False  # optional unmodelled effect in the truth replay

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise GenerationError("noise_sigma must be non-negative")
        if not self.density > 0:
            raise GenerationError("density must be positive")
        if self.occlusion_radius < 0:
            raise GenerationError("occlusion_radius must be non-negative")


# probe scripts ------------------------------------------------------------------

@dataclass(frozen=True)
class Poke:
    start: tuple  # probe centre before and after the poke
    target: tuple  # surface point aimed at
    depth: float  # travel beyond first contact, mm
    duration: float  # approach + dwell + retract, s


@dataclass(frozen=True)
class ProbeScript:
    pokes: tuple
    face: str = "top"  # top | side
    bounds: tuple = ((0.0, 0.0, 0.0), (68.7, 35.8, 39.3))  # phantom box
    workspace_margin: float = 40.0
    probe_radius: float = 5.0
    contact_offset: float = 0.5
    travel_speed: float = 40.0  # mm/s
    clearance: float = 15.0  # mm above the top while travelling
    dwell_fraction: float = 0.2
    jitter: float = 0.02  # mm, perpendicular to the poke axis

    @property
    def shell(self) -> float:
        return self.probe_radius + self.contact_offset

    def validate(self) -> None:
        if self.face not in ("top", "side"):
            raise ScriptError(f"unknown face {self.face!r}")
        if not self.pokes:
            raise ScriptError("script has no pokes")
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        for i, p in enumerate(self.pokes):
            s, t = np.asarray(p.start, float), np.asarray(p.target, float)
            if np.any(t < lo - self.workspace_margin) or np.any(t > hi + self.workspace_margin):
                raise ScriptError(f"poke {i}: target {t.tolist()} outside the workspace")
            if np.any(s < lo - self.workspace_margin) or np.any(s > hi + self.workspace_margin + self.clearance):
                raise ScriptError(f"poke {i}: start {s.tolist()} outside the workspace")
            if p.depth < 0 or not p.duration > 0:
                raise ScriptError(f"poke {i}: depth must be >= 0 and duration > 0")
            axis = t - s
            if np.linalg.norm(axis) <= self.shell:
                raise ScriptError(f"poke {i}: start lies within one probe shell of the target")
            thickness = (hi - lo)[int(np.argmax(np.abs(axis)))]
            if p.depth >= thickness:
                raise ScriptError(f"poke {i}: depth {p.depth} mm exceeds the phantom thickness {thickness} mm")
            if np.all(s > lo - self.shell) and np.all(s < hi + self.shell):
                raise ScriptError(f"poke {i}: start is in contact with the phantom")


def _ease(n: int) -> np.ndarray:
    """Cosine easing from 0 to 1 over ``n`` samples, both ends included."""
    return 0.5 - 0.5 * np.cos(np.pi * np.linspace(0.0, 1.0, n))


def poke_profile(n: int, dwell_fraction: float) -> np.ndarray:
    """Approach-dwell-retract progress in [0, 1] over ``n`` samples."""
    n_dwell = int(round(n * dwell_fraction))
    n_in = (n - n_dwell) // 2
    n_out = n - n_dwell - n_in
    return np.concatenate([_ease(n_in + 1)[1:], np.ones(n_dwell), _ease(n_out + 1)[::-1][1:]])


def generate_trajectory(script: ProbeScript, rate: float = 1000.0, seed: int = 0) -> KinematicsTrajectory:
    """Sampled probe-centre trajectory for a poke script.

    Each poke eases from its start to ``target - axis * (shell - depth)`` and back,
    so depth 0 brings the probe exactly to the contact shell of the target.
    Consecutive pokes are joined by lift / traverse / descend travel moves.
    """
    script.validate()
    if not rate > 0:
        raise ScriptError("rate must be positive")
    rng = np.random.default_rng(seed)
    top = script.bounds[1][2] + script.shell + script.clearance
    segments = [np.asarray(script.pokes[0].start, float)[None]]
    for i, p in enumerate(script.pokes):
        s, t = np.asarray(p.start, float), np.asarray(p.target, float)
        if i > 0:
            prev = segments[-1][-1]
            waypoints = [prev, np.array([*prev[:2], max(top, prev[2])]), np.array([*s[:2], max(top, s[2])]), s]
            for a, b in zip(waypoints[:-1], waypoints[1:]):
                dist = float(np.linalg.norm(b - a))
                if dist == 0:
                    continue
                n = max(int(np.ceil(dist / script.travel_speed * rate)), 1)
                segments.append(a + np.outer(_ease(n + 1)[1:], b - a))
        axis = (t - s) / np.linalg.norm(t - s)
        deepest = t - axis * (script.shell - p.depth)
        n = max(int(round(p.duration * rate)), 2)
        prog = poke_profile(n, script.dwell_fraction)
        path = s + np.outer(prog, deepest - s)
        if script.jitter > 0:
            j = rng.normal(0.0, script.jitter, (n, 3))
            j -= np.outer(j @ axis, axis)
            path = path + j
        segments.append(path)
    pos = np.concatenate(segments)
    return KinematicsTrajectory(np.arange(len(pos)) / rate, pos)


def random_script(rng: np.random.Generator, mesh: TetMesh, n_pokes: int = 3, depth_range=(3.0, 5.0),
                  duration_range=(2.0, 3.0), side_fraction: float = 0.0, lateral_jitter: float = 1.0,
                  standoff: float = 10.0, probe_radius: float = 5.0, contact_offset: float = 0.5) -> ProbeScript:
    """Pokes aimed near random surface vertices (the probe is about one cell wide)."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    nx, ny, nz = mesh.shape
    shell = probe_radius + contact_offset
    pokes = []
    for _ in range(n_pokes):
        side = rng.random() < side_fraction
        if side:
            face = int(rng.integers(4))  # x-, x+, y-, y+
            ax, sign = face // 2, (-1.0, 1.0)[face % 2]
            i = (0 if sign < 0 else (nx, ny)[ax] - 1)
            other = int(rng.integers(1, (ny, nx)[ax] - 1))
            k = int(rng.integers(2, nz))
            ijk = [0, 0, k]
            ijk[ax], ijk[1 - ax] = i, other
            target = mesh.vertices[mesh.vertex_id(*ijk)].copy()
            normal = np.zeros(3)
            normal[ax] = sign
        else:
            i, j = int(rng.integers(1, nx - 1)), int(rng.integers(1, ny - 1))
            target = mesh.vertices[mesh.vertex_id(i, j, nz - 1)].copy()
            normal = np.array([0.0, 0.0, 1.0])
        tangent = rng.normal(0.0, lateral_jitter, 3)
        target = target + tangent - normal * (tangent @ normal)
        target = np.clip(target, lo, hi)
        start = target + normal * (shell + standoff)
        pokes.append(Poke(tuple(start), tuple(target), float(rng.uniform(*depth_range)),
                          float(rng.uniform(*duration_range))))
    return ProbeScript(tuple(pokes), face="side" if side_fraction > 0 else "top", bounds=(tuple(lo), tuple(hi)),
                       probe_radius=probe_radius, contact_offset=contact_offset)


# observation rendering -------------------------------------------------------------------

def top_area(mesh: TetMesh) -> float:
    ext = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    return float(ext[0] * ext[1])


def observation_factor(mesh: TetMesh, density: float) -> int:
    """Smallest super-sampling factor whose top lattice reaches ``density``."""
    nx, ny, _ = mesh.shape
    area = top_area(mesh)
    for f in range(1, MAX_SUPERSAMPLE + 1):
        if ((nx - 1) * f + 1) * ((ny - 1) * f + 1) >= density * area:
            return f
    raise GenerationError(f"density {density} points/mm^2 needs a super-sampling factor above {MAX_SUPERSAMPLE}")


def render_observation(positions: np.ndarray, mesh: TetMesh, truth: SceneTruth, probe_center,
                       rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Synthetic depth cloud of the top surface, in the camera frame."""
    rng = np.random.default_rng(0) if rng is None else rng
    factor = observation_factor(mesh, truth.density)
    pts = mesh.sampler(factor, "top").sample(positions)
    target = int(round(truth.density * top_area(mesh)))
    if target < len(pts):
        keep = np.sort(rng.choice(len(pts), size=target, replace=False))
        pts = pts[keep]
    if truth.occlusion_radius > 0 and probe_center is not None:
        c = np.asarray(probe_center, float)
        pts = pts[np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) >= truth.occlusion_radius]
    if truth.noise_sigma > 0:
        pts = pts + rng.normal(0.0, truth.noise_sigma, pts.shape)
    return PointCloud(truth.camera_transform.apply(pts))


def marker_registration(mesh: TetMesh, truth: SceneTruth, rng: np.random.Generator, marker_sigma: float = 0.0
                        ) -> RigidTransform:
    """Camera -> sim transform from the four top corners seen by the camera."""
    nx, ny, nz = mesh.shape
    ids = [mesh.vertex_id(i, j, nz - 1) for i in (0, nx - 1) for j in (0, ny - 1)]
    sim = mesh.vertices[ids]
    seen = truth.camera_transform.apply(sim)
    if marker_sigma > 0:
        seen = seen + rng.normal(0.0, marker_sigma, seen.shape)
    return fit_rigid(seen, sim)


# datasets ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    n_sequences: int = 13
    pokes_per_sequence: int = 3
    depth_range: tuple = (3.0, 5.0)
    duration_range: tuple = (2.0, 3.0)
    side_fraction: float = 0.25
    trajectory_rate: float = 300.0
    frame_rate: float = 30.0
    marker_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 3:
            raise DatasetError("a dataset needs at least 3 sequences (validation + 2 test)")


def split_for(index: int) -> str:
    return "val" if index == 0 else ("test" if index <= 2 else "train")


@dataclass
class SequenceData:
    name: str
    split: str
    seed: int
    trajectory: KinematicsTrajectory  # full-rate kinematics
    frame_times: np.ndarray
    probe_at_frames: np.ndarray  # (F, 3)
    truth: ReplayResult
    camera_clouds: list  # PointCloud per frame, camera frame
    registration: RigidTransform  # camera -> sim

    @property
    def schedule(self) -> FrameSchedule:
        return FrameSchedule(tuple(float(t) for t in self.frame_times))

    def registered_clouds(self) -> list:
        return [c.transformed(self.registration.rotation, self.registration.translation) for c in self.camera_clouds]


@dataclass
class Dataset:
    mesh: TetMesh
    truth: SceneTruth
    solver: SolverConfig
    probe: ProbeSphere
    spec: DatasetSpec
    sequences: list
    root: Optional[Path] = None  # when set, sim runs are read from / written to disk
    _sim_cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list:
        return [s for s in self.sequences if s.split == name]

    def sequence(self, name: str) -> SequenceData:
        for s in self.sequences:
            if s.name == name:
                return s
        raise DatasetError(f"no sequence named {name!r}")

    def material(self, modulus: float) -> MaterialParams:
        return replace(self.truth.true_material, young_modulus=float(modulus))

    def sim_dir(self, seq: SequenceData, modulus: float) -> Optional[Path]:
        return None if self.root is None else self.root / seq.name / f"sim_E{modulus:g}"

    def simulate(self, seq: SequenceData, material: MaterialParams) -> ReplayResult:
        key = (seq.name, material)
        if key not in self._sim_cache:
            d = self.sim_dir(seq, material.young_modulus)
            if d is not None and (d / "run_meta").exists():
                self._sim_cache[key] = read_run(d)
            else:
                run = run_replay(self.mesh, material, self.solver, self.probe, seq.trajectory, seq.schedule)
                if d is not None:
                    write_run(run, d)
                self._sim_cache[key] = run
        return self._sim_cache[key]


def generate_sequence(index: int, mesh: TetMesh, truth: SceneTruth, solver: SolverConfig, probe: ProbeSphere,
                      spec: DatasetSpec) -> SequenceData:
    seed = int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    script = random_script(rng, mesh, spec.pokes_per_sequence, spec.depth_range, spec.duration_range,
                           spec.side_fraction, probe_radius=probe.radius,
                           contact_offset=probe.min_contact_distance)
    traj = generate_trajectory(script, spec.trajectory_rate, seed)
    frames = subsample_to_frames(traj, spec.frame_rate)
    name = f"seq{index:02d}"
    truth_solver = replace(solver, gravity=GRAVITY) if truth.gravity else solver
    result = run_replay(mesh, truth.true_material, truth_solver, probe, traj, FrameSchedule(tuple(frames.times)))
    if result.diverged:
        raise DatasetError(f"truth replay of {name} diverged at frame {result.diverged_at_frame}")
    probes = np.array([traj.interpolate(t) for t in frames.times])
    clouds = [render_observation(p, mesh, truth, c, np.random.default_rng([seed, f]))
              for f, (p, c) in enumerate(zip(result.positions, probes))]
    reg = marker_registration(mesh, truth, np.random.default_rng([seed, 1 << 20]), spec.marker_sigma)
    return SequenceData(name, split_for(index), seed, traj, np.asarray(frames.times), probes, result, clouds, reg)


def make_dataset(mesh: TetMesh, truth: SceneTruth, spec: DatasetSpec = DatasetSpec(),
                 solver: SolverConfig = SolverConfig(), probe: ProbeSphere = ProbeSphere(), log=None) -> Dataset:
    """Truth replays and observations for every sequence, split val / test / train."""
    seqs = []
    for i in range(spec.n_sequences):
        seqs.append(generate_sequence(i, mesh, truth, solver, probe, spec))
        if log:
            log(f"generated {seqs[-1].name} ({seqs[-1].split}, {len(seqs[-1].frame_times)} frames)")
    return Dataset(mesh, truth, solver, probe, spec, seqs)


def manifest_lines(ds: Dataset, sim_moduli: Sequence[float] = ()) -> list:
    t = ds.truth
    lines = [
        "# softcorrect dataset v1",
        f"seed {ds.spec.seed}",
        f"true_material E={t.true_material.young_modulus:g} nu={t.true_material.poisson_ratio:g} "
        f"rho={t.true_material.density:.9g}",
        f"sim_moduli {' '.join(f'{e:g}' for e in sim_moduli) or '-'}",
        f"noise_sigma {t.noise_sigma:g} density {t.density:g} occlusion_radius {t.occlusion_radius:g} "
        f"gravity {int(t.gravity)}",
        "sequence split seed frames",
    ]
    lines += [f"{s.name} {s.split} {s.seed} {len(s.frame_times)}" for s in ds.sequences]
    return lines


def write_dataset(ds: Dataset, out_dir, sim_moduli: Sequence[float] = ()) -> Path:
    """Layout: manifest.txt, spec.json and per sequence trajectory.csv, frames/, clouds/,
    registration.txt and sim_E<E>/ runs for every requested modulus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in ds.sequences:
        d = out / s.name
        d.mkdir(exist_ok=True)
        write_trajectory(d / "trajectory.csv", s.trajectory)
        write_run(s.truth, d / "frames")
        (d / "clouds").mkdir(exist_ok=True)
        for f, c in enumerate(s.camera_clouds):
            write_cloud(d / "clouds" / f"frame_{f:06d}.txt", c)
        write_transform(d / "registration.txt", s.registration)
        for E in sim_moduli:
            write_run(ds.simulate(s, ds.material(E)), d / f"sim_E{E:g}")
    t = ds.truth
    truth = {"true_material": asdict(t.true_material), "camera_transform": t.camera_transform.as_row_major().tolist(),
             "noise_sigma": t.noise_sigma, "density": t.density, "occlusion_radius": t.occlusion_radius,
             "gravity": t.gravity}
    spec = {"dataset": asdict(ds.spec), "solver": asdict(ds.solver), "probe": asdict(ds.probe), "truth": truth,
            "mesh": {"node_counts": list(ds.mesh.shape), "vertices_sha256": hashlib.sha256(
                np.ascontiguousarray(ds.mesh.vertices).tobytes()).hexdigest()}}
    (out / "spec.json").write_text(json.dumps(spec, indent=1, default=list) + "\n")
    (out / "manifest.txt").write_text("\n".join(manifest_lines(ds, sim_moduli)) + "\n")
    ds.root = out
    return out


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_dataset(root, mesh: TetMesh) -> Dataset:
    """Read a dataset written by :func:`write_dataset`; sim runs load lazily."""
    root = Path(root)
    for name in ("manifest.txt", "spec.json"):
        if not (root / name).is_file():
            raise DatasetError(f"missing dataset file: {root / name}")
    meta = json.loads((root / "spec.json").read_text())
    t = meta["truth"]
    truth = SceneTruth(MaterialParams(**t["true_material"]), RigidTransform.from_row_major(t["camera_transform"]),
                       t["noise_sigma"], t["density"], t["occlusion_radius"], t["gravity"])
    if tuple(meta["mesh"]["node_counts"]) != mesh.shape:
        raise DatasetError(f"{root}: dataset mesh {meta['mesh']['node_counts']} does not match {mesh.shape}")
    spec = DatasetSpec(**_tuples(meta["dataset"]))
    solver = SolverConfig(**_tuples(meta["solver"]))
    probe = ProbeSphere(**_tuples(meta["probe"]))
    lines = (root / "manifest.txt").read_text().splitlines()
    start = lines.index("sequence split seed frames") + 1
    seqs = []
    for line in lines[start:]:
        if not line.strip():
            continue
        name, split, seed, n = line.split()
        d = root / name
        traj = read_trajectory(d / "trajectory.csv")
        run = read_run(d / "frames")
        times = np.asarray(run.times)
        clouds = [read_cloud(d / "clouds" / f"frame_{f:06d}.txt") for f in range(int(n))]
        probes = np.array([traj.interpolate(x) for x in times])
        seqs.append(SequenceData(name, split, int(seed), traj, times, probes, run, clouds,
                                 read_transform(d / "registration.txt")))
    return Dataset(mesh, truth, solver, probe, spec, seqs, root)


def directory_hash(path) -> str:
    """SHA-256 over every file (relative path and bytes) below ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
