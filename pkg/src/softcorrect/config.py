"""Sectioned run configuration (INI syntax) with ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .correction import TrainConfig, UNetConfig
from .errors import ConfigurationError
from .fem import MaterialParams, ProbeSphere, SolverConfig
from .mesh import PHANTOM_MASS, GridMeshSpec, TetMesh, build_grid_mesh, load_mesh
from .search import SearchSpec
from .synth import DatasetSpec, SceneTruth

# section -> key -> parser
_floats = lambda s: tuple(float(v) for v in s.replace(",", " ").split())
_ints = lambda s: tuple(int(v) for v in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


SCHEMA = {
    "run": {"seed": int, "output_dir": str},
    "mesh": {"file": str, "node_counts": _ints, "extents": _floats},
    "material": {"young_modulus": float, "poisson_ratio": float, "density": float},
    "solver": {"dt": float, "rayleigh_mass": float, "rayleigh_stiffness": float, "cg_tolerance": float,
               "cg_max_iters": int, "divergence_threshold": float, "preconditioner": str,
               "implicit_contact": _bool},
    "probe": {"radius": float, "contact_stiffness": float, "min_contact_distance": float},
    "truth": {"young_modulus": float, "noise_sigma": float, "density": float, "occlusion_radius": float,
              "gravity": _bool},
    "dataset": {"n_sequences": int, "pokes_per_sequence": int, "depth_range": _floats, "duration_range": _floats,
                "side_fraction": float, "trajectory_rate": float, "frame_rate": float, "marker_sigma": float,
                "sim_moduli": _floats},
    "network": {"dimensionality": int, "clamp_fraction": float, "zero_head": _bool},
    "train": {"learning_rate": float, "epochs": int, "patience": int, "frame_stride": int, "lr_decay": float,
              "sim_modulus": float},
    "search": {"coarse_values": _floats, "fine_multipliers": _floats, "sequence": str},
}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Path = Path("runs")
    mesh_file: Optional[Path] = None
    mesh_spec: GridMeshSpec = field(default_factory=GridMeshSpec)
    material: MaterialParams = field(default_factory=MaterialParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    probe: ProbeSphere = field(default_factory=ProbeSphere)
    truth: SceneTruth = field(default_factory=SceneTruth)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sim_moduli: tuple = ()
    dimensionality: int = 2
    clamp_fraction: float = 0.5
    zero_head: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    train_modulus: Optional[float] = None
    search: SearchSpec = field(default_factory=SearchSpec)
    search_sequence: Optional[str] = None

    def build_mesh(self) -> TetMesh:
        return load_mesh(self.mesh_file) if self.mesh_file is not None else build_grid_mesh(self.mesh_spec)

    def unet(self, mesh: TetMesh, dimensionality: Optional[int] = None) -> UNetConfig:
        return UNetConfig.for_mesh(mesh, dimensionality or self.dimensionality, clamp_fraction=self.clamp_fraction)

    @property
    def moduli(self) -> tuple:
        """Every sim modulus a dataset should carry replays for."""
        vals = list(self.sim_moduli)
        for v in (self.train_modulus, self.material.young_modulus):
            if v is not None and v not in vals:
                vals.append(v)
        return tuple(vals)


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value.strip()
    return out


def read_raw(path: Optional[Path], overrides: Sequence[str] = ()) -> dict:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.read(path)
        raw = {s: dict(cp[s]) for s in cp.sections()}
    for s, kv in parse_overrides(overrides).items():
        raw.setdefault(s, {}).update(kv)
    typed: dict = {}
    for s, kv in raw.items():
        if s not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{s}]")
        for k, v in kv.items():
            if k not in SCHEMA[s]:
                raise ConfigurationError(f"unknown key {s}.{k}")
            try:
                typed.setdefault(s, {})[k] = SCHEMA[s][k](v)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {s}.{k}: {v!r} ({exc})") from None
    return typed


def load_config(path=None, overrides: Sequence[str] = (), base_dir: Optional[Path] = None) -> RunConfig:
    """Typed config; relative file paths resolve against the config file's directory."""
    t = read_raw(path, overrides)
    base = Path(base_dir) if base_dir is not None else (Path(path).parent if path is not None else Path.cwd())
    get = lambda s: t.get(s, {})
    run, mesh = get("run"), get("mesh")
    cfg = RunConfig(seed=run.get("seed", 0), output_dir=base / run.get("output_dir", "runs"))
    if "file" in mesh:
        f = Path(mesh["file"])
        f = f if f.is_absolute() else base / f
        if not f.is_file():
            raise ConfigurationError(f"mesh file not found: {f}")
        cfg.mesh_file = f
    cfg.mesh_spec = GridMeshSpec(**{k: v for k, v in mesh.items() if k != "file"})
    mat = dict(get("material"))
    if "density" not in mat:
        # keep the phantom's total mass when the extents change
        mat["density"] = PHANTOM_MASS / float(np.prod(cfg.mesh_spec.extents))
    cfg.material = MaterialParams(**mat)
    cfg.solver = SolverConfig(**get("solver"))
    cfg.probe = ProbeSphere(**get("probe"))
    tr = dict(get("truth"))
    true_E = tr.pop("young_modulus", cfg.material.young_modulus)
    cfg.truth = SceneTruth(MaterialParams(true_E, cfg.material.poisson_ratio, cfg.material.density), **tr)
    ds = dict(get("dataset"))
    cfg.sim_moduli = ds.pop("sim_moduli", ())
    cfg.dataset = DatasetSpec(seed=cfg.seed, **ds)
    net = get("network")
    cfg.dimensionality = net.get("dimensionality", 2)
    cfg.clamp_fraction = net.get("clamp_fraction", 0.5)
    cfg.zero_head = net.get("zero_head", True)
    trn = dict(get("train"))
    cfg.train_modulus = trn.pop("sim_modulus", None)
    cfg.train = TrainConfig(seed=cfg.seed, **trn)
    srch = dict(get("search"))
    cfg.search_sequence = srch.pop("sequence", None)
    cfg.search = SearchSpec(**srch)
    if cfg.dimensionality not in (2, 3):
        raise ConfigurationError("network.dimensionality must be 2 or 3")
    return cfg
