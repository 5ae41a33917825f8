"""UNet correction networks (2D top layer / 3D full grid) and their training loop.

The network maps normalised simulated vertex positions plus the probe centre
to a per-vertex displacement bounded by ``clamp_fraction * voxel_spacing`` on
every axis. Only the top vertex layer receives the correction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, MissingArtifactError, ShapeError, TrainingError
from .mesh import PHANTOM_NODES, GridMeshSpec, TetMesh
from .pointcloud import PointCloud, chamfer_one_directional

LOSS_FACTOR = 3  # surface super-sampling used for every mesh-to-cloud comparison


def padded_shape(counts: Sequence[int], multiple: int = 4) -> tuple[int, ...]:
    return tuple(int(-(-c // multiple) * multiple) for c in counts)


@dataclass(frozen=True)
class UNetConfig:
    dimensionality: int = 2
    node_counts: tuple[int, int, int] = PHANTOM_NODES
    grid_shape: Optional[tuple[int, ...]] = None  # padded spatial dims; derived when None
    voxel_spacing: tuple[float, float, float] = tuple(GridMeshSpec().spacing)
    encoder_features: tuple[int, int, int] = (64, 128, 256)
    convs_per_block: int = 2
    pool_kernel: int = 2
    bottleneck_extra_convs: int = 4
    kinematics_dim: int = 3
    clamp_fraction: float = 0.5

    def __post_init__(self):
        if self.dimensionality not in (2, 3):
            raise ConfigurationError("dimensionality must be 2 or 3")
        if tuple(self.encoder_features) != (64, 128, 256):
            raise ConfigurationError("encoder features are fixed at (64, 128, 256)")
        if self.convs_per_block != 2 or self.pool_kernel != 2 or self.bottleneck_extra_convs != 4:
            raise ConfigurationError("block layout is fixed: 2 convs per block, pool 2, 4 bottleneck convs")
        if self.kinematics_dim != 3:
            raise ConfigurationError("kinematics are the 3D probe centre")
        if not 0 < self.clamp_fraction <= 1:
            raise ConfigurationError("clamp_fraction must lie in (0, 1]")
        mesh_dims = tuple(self.node_counts[: self.dimensionality])
        grid = padded_shape(mesh_dims) if self.grid_shape is None else tuple(int(g) for g in self.grid_shape)
        if len(grid) != self.dimensionality:
            raise ConfigurationError(f"grid_shape {grid} does not match dimensionality {self.dimensionality}")
        if any(g % 4 for g in grid):
            raise ConfigurationError(f"grid_shape {grid} must be divisible by 4 for two pooling levels")
        if any(g < m for g, m in zip(grid, mesh_dims)):
            raise ConfigurationError(f"grid_shape {grid} is smaller than the mesh {mesh_dims}")
        object.__setattr__(self, "grid_shape", grid)
        object.__setattr__(self, "node_counts", tuple(int(n) for n in self.node_counts))
        object.__setattr__(self, "voxel_spacing", tuple(float(s) for s in self.voxel_spacing))

    @classmethod
    def for_mesh(cls, mesh: TetMesh, dimensionality: int = 2, **kw) -> "UNetConfig":
        return cls(dimensionality=dimensionality, node_counts=mesh.shape, voxel_spacing=tuple(mesh.spacing), **kw)

    @property
    def clamp(self) -> np.ndarray:
        return self.clamp_fraction * np.asarray(self.voxel_spacing)


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    f1, f2, f3 = cfg.encoder_features
    k = cfg.kinematics_dim
    return [
        ("enc1.0", 3, f1), ("enc1.1", f1, f1),
        ("enc2.0", f1, f2), ("enc2.1", f2, f2),
        ("enc3.0", f2, f3), ("enc3.1", f3, f3),
        ("kin.0", f3 + k, f3), ("kin.1", f3, f3), ("kin.2", f3, f3), ("kin.3", f3, f3),
        ("up2", f3, f2), ("dec2.0", 2 * f2, f2), ("dec2.1", f2, f2),
        ("up1", f2, f1), ("dec1.0", 2 * f1, f1), ("dec1.1", f1, f1),
        ("head", f1, 3),
    ]


@dataclass
class CorrectionModel:
    config: UNetConfig
    params: dict
    offset: np.ndarray  # rest bounding-box centre
    scale: np.ndarray  # rest bounding-box half extents

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # index bookkeeping between mesh vertices and padded grid cells
    @property
    def _mesh_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """(vertex ids, flat padded-grid cells) of the vertices the network sees."""
        nx, ny, nz = self.config.node_counts
        grid = self.config.grid_shape
        if self.config.dimensionality == 2:
            i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            k = np.full_like(i, nz - 1)
            cells = i * grid[1] + j
        else:
            i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
            cells = (i * grid[1] + j) * grid[2] + k
        ids = i + nx * (j + ny * k)
        return ids.ravel(), cells.ravel()

    @property
    def top_cells(self) -> tuple[np.ndarray, np.ndarray]:
        """(top-layer vertex ids, flat padded-grid cells)."""
        ids, cells = self._mesh_cells
        nx, ny, nz = self.config.node_counts
        top = ids >= nx * ny * (nz - 1)
        return ids[top], cells[top]

    def mask(self) -> np.ndarray:
        """1 on grid cells holding a top-layer vertex, 0 elsewhere (padding included)."""
        m = np.zeros(int(np.prod(self.config.grid_shape)))
        m[self.top_cells[1]] = 1.0
        return m.reshape(self.config.grid_shape)

    def encode_inputs(self, sim_positions: np.ndarray, probe) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(sim_positions, float)
        nx, ny, nz = self.config.node_counts
        ids, cells = self._mesh_cells
        if self.config.dimensionality == 2 and pos.shape == (nx * ny, 3):
            ids = ids - nx * ny * (nz - 1)  # top layer given on its own
        elif pos.shape != (nx * ny * nz, 3):
            raise ShapeError(f"expected {(nx * ny * nz, 3)} vertex positions, got {pos.shape}")
        x = np.zeros((3, int(np.prod(self.config.grid_shape))))
        x[:, cells] = ((pos[ids] - self.offset) / self.scale).T
        kin = (np.asarray(probe, float).reshape(3) - self.offset) / self.scale
        return x.reshape((3,) + self.config.grid_shape), kin


def build(config: UNetConfig, rest_vertices: Optional[np.ndarray] = None, seed: int = 0,
          zero_head: bool = False) -> CorrectionModel:
    """Fresh model with Glorot-uniform convolutions and zero biases."""
    rng = np.random.default_rng(seed)
    nd = config.dimensionality
    params = {}
    for name, cin, cout in _layer_specs(config):
        shape = (cout, cin) + (3,) * nd
        w = np.zeros(shape) if (zero_head and name == "head") else ad.glorot_uniform(rng, shape)
        params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")
    if rest_vertices is None:
        spacing = np.asarray(config.voxel_spacing)
        ext = spacing * (np.asarray(config.node_counts) - 1)
        lo, hi = np.zeros(3), ext
    else:
        lo, hi = np.min(rest_vertices, axis=0), np.max(rest_vertices, axis=0)
    return CorrectionModel(config, params, (lo + hi) / 2.0, (hi - lo) / 2.0)


def _block(model: CorrectionModel, x: Tensor, names: Sequence[str]) -> Tensor:
    for n in names:
        x = ad.relu(ad.conv(x, model.params[f"{n}.w"], model.params[f"{n}.b"]))
    return x


def forward_grid(model: CorrectionModel, x: np.ndarray, kin: np.ndarray) -> Tensor:
    """Displacement grid ``(3, *grid_shape)`` in mm for an encoded input."""
    cfg = model.config
    if x.shape != (3,) + cfg.grid_shape:
        raise ShapeError(f"network input must be {(3,) + cfg.grid_shape}, got {x.shape}")
    p = model.params
    s1 = _block(model, Tensor(x), ["enc1.0", "enc1.1"])
    s2 = _block(model, ad.maxpool(s1), ["enc2.0", "enc2.1"])
    b = _block(model, ad.maxpool(s2), ["enc3.0", "enc3.1"])
    b = ad.concat([b, ad.tile_channels(Tensor(kin), b.shape[1:])])
    b = _block(model, b, ["kin.0", "kin.1", "kin.2", "kin.3"])
    u2 = ad.relu(ad.conv(ad.upsample(b, s2.shape[1:]), p["up2.w"], p["up2.b"]))
    d2 = _block(model, ad.concat([u2, s2]), ["dec2.0", "dec2.1"])
    u1 = ad.relu(ad.conv(ad.upsample(d2, s1.shape[1:]), p["up1.w"], p["up1.b"]))
    d1 = _block(model, ad.concat([u1, s1]), ["dec1.0", "dec1.1"])
    out = ad.tanh(ad.conv(d1, p["head.w"], p["head.b"]))
    scale = cfg.clamp.reshape((3,) + (1,) * cfg.dimensionality)
    return ad.mul(out, scale)


def forward(model: CorrectionModel, sim_positions: np.ndarray, probe) -> Tensor:
    x, kin = model.encode_inputs(sim_positions, probe)
    return forward_grid(model, x, kin)


def top_displacement(model: CorrectionModel, grid: Tensor) -> Tensor:
    """``(N_top, 3)`` displacement of the top-layer vertices, in mesh order."""
    return ad.take_cells(grid, model.top_cells[1])


def apply_correction(mesh: TetMesh, sim_positions: np.ndarray, displacement, model: Optional[CorrectionModel] = None):
    """Add the displacement to the top layer only.

    ``displacement`` is either a per-vertex ``(V, 3)`` array or a padded grid
    (array or Tensor) produced by ``model``; non-top and padding cells are ignored.
    Returns a Tensor when ``displacement`` is one, otherwise an array.
    """
    sim = np.asarray(sim_positions, float)
    top = mesh.top_set
    if isinstance(displacement, Tensor):
        if model is None:
            raise ValueError("a grid displacement needs its model for the cell layout")
        return ad.index_add(sim, model.top_cells[0], top_displacement(model, displacement))
    disp = np.asarray(displacement, float)
    out = sim.copy()
    if disp.shape == sim.shape:
        out[top] += disp[top]
        return out
    if model is None:
        raise ShapeError(f"displacement shape {disp.shape} needs a model to interpret")
    ids, cells = model.top_cells
    out[ids] += disp.reshape(3, -1)[:, cells].T
    return out


def corrected_positions(model: CorrectionModel, mesh: TetMesh, sim_positions: np.ndarray, probe) -> np.ndarray:
    grid = forward(model, sim_positions, probe)
    return apply_correction(mesh, sim_positions, grid.data, model)


def sample_loss(model: CorrectionModel, mesh: TetMesh, sim_positions, probe, observed, factor: int = LOSS_FACTOR) -> Tensor:
    """Chamfer from the observed cloud to the super-sampled corrected surface."""
    grid = forward(model, sim_positions, probe)
    corrected = apply_correction(mesh, sim_positions, grid, model)
    pts = ad.sparse_linear(mesh.sampler(factor).weights, corrected)
    obs = observed.points if isinstance(observed, PointCloud) else observed
    return ad.chamfer_loss(pts, obs)


def frame_distance(mesh: TetMesh, positions: np.ndarray, observed, factor: int = LOSS_FACTOR) -> float:
    reference = mesh.sampler(factor).sample(positions)
    return chamfer_one_directional(observed, reference)


# training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    frame_stride: int = 1  # use every n-th training frame
    lr_decay: float = 1.0  # learning-rate factor applied after each epoch without validation improvement

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.frame_stride < 1 or not self.learning_rate > 0:
            raise ConfigurationError("epochs, patience, frame_stride and learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")


@dataclass
class Sample:
    positions: np.ndarray
    probe: np.ndarray
    observed: np.ndarray


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    model: CorrectionModel
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)  # rate used in each epoch
    best_epoch: int = -1
    stopped_early: bool = False


def mean_loss(model: CorrectionModel, mesh: TetMesh, samples: Sequence[Sample]) -> float:
    return float(np.mean([frame_distance(mesh, corrected_positions(model, mesh, s.positions, s.probe), s.observed)
                          for s in samples]))


def train(model: CorrectionModel, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          mesh: TetMesh, cfg: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Per-sample Adam on the Chamfer loss with early stopping on validation loss.

    The returned model holds the weights of the best validation epoch.
    """
    if len(train_samples) == 0:
        raise TrainingError("empty training set")
    samples = list(train_samples)[:: cfg.frame_stride]
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    result = TrainResult(model)
    best = {k: v.data.copy() for k, v in model.params.items()}
    for epoch in range(cfg.epochs):
        losses = []
        for i in rng.permutation(len(samples)):
            s = samples[i]
            opt.zero_grad()
            try:
                loss = sample_loss(model, mesh, s.positions, s.probe, s.observed)
                loss.backward()
                opt.step()
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss or weights in epoch {epoch}", epoch) from exc
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise TrainingError(f"non-finite training loss in epoch {epoch}", epoch)
        val = mean_loss(model, mesh, val_samples) if len(val_samples) else train_loss
        result.train_loss.append(train_loss)
        result.val_loss.append(val)
        result.learning_rate.append(opt.lr)
        if log:
            log(f"epoch {epoch}: train {train_loss:.4f} val {val:.4f}")
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best = {k: v.data.copy() for k, v in model.params.items()}
        if stop:
            result.stopped_early = True
            break
        if stopper.bad:
            opt.lr *= cfg.lr_decay
    for k, v in model.params.items():
        v.data = best[k]
    result.best_epoch = stopper.best_epoch
    return result


# evaluation ---------------------------------------------------------------------------------

@dataclass
class RolloutResult:
    frame_ids: list
    uncorrected: list  # per-frame Chamfer, None where missing or diverged
    corrected: list
    feedback: str = "none"
    diverged: bool = False
    diverged_at_frame: Optional[int] = None

    def _pairs(self):
        return [(u, c) for u, c in zip(self.uncorrected, self.corrected) if u is not None and c is not None]

    @property
    def uncorrected_mean(self) -> float:
        return float(np.mean([u for u, _ in self._pairs()]))

    @property
    def corrected_mean(self) -> float:
        return float(np.mean([c for _, c in self._pairs()]))

    @property
    def improvement_pct(self) -> float:
        u = self.uncorrected_mean
        return 0.0 if u == 0 else 100.0 * (u - self.corrected_mean) / u


def evaluate_rollout(model: CorrectionModel, mesh: TetMesh, material, solver, probe, trajectory, schedule,
                     clouds: Sequence, feedback: str = "none", baseline=None) -> RolloutResult:
    """Replay the FEM and score corrected against uncorrected frames.

    With ``feedback='top-layer'`` the corrected top layer is written back into
    the FEM state (velocities kept) before stepping on. ``uncorrected`` always
    comes from a plain replay, which may be passed in as ``baseline``.
    """
    from .fem import run_replay

    if feedback not in ("none", "top-layer"):
        raise ConfigurationError(f"feedback must be 'none' or 'top-layer', got {feedback!r}")
    if baseline is None:
        baseline = run_replay(mesh, material, solver, probe, trajectory, schedule)
    times = list(schedule.frame_times)
    probes = [trajectory.interpolate(t) for t in times]
    score = lambda pos, f: None if pos is None or clouds[f] is None else frame_distance(mesh, pos, clouds[f])
    unc = [score(p, f) for f, p in enumerate(baseline.positions)]
    if feedback == "none":
        cor = [None if p is None else score(corrected_positions(model, mesh, p, probes[f]), f)
               for f, p in enumerate(baseline.positions)]
        run = baseline
    else:
        cor = [None] * len(times)

        def hook(fid, state):
            fixed = corrected_positions(model, mesh, state.positions, probes[fid])
            cor[fid] = score(fixed, fid)
            return fixed

        run = run_replay(mesh, material, solver, probe, trajectory, schedule, on_frame=hook)
    div_at = [r.diverged_at_frame for r in (baseline, run) if r.diverged]
    return RolloutResult(list(range(len(times))), unc, cor, feedback, bool(div_at), min(div_at) if div_at else None)


# persistence ------------------------------------------------------------------------------

def save_model(model: CorrectionModel, directory, **extra) -> Path:
    """``weights.scnn`` plus a ``model.cfg`` sidecar; ``extra`` keys go into the sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ad.save_weights(d / "weights.scnn", model.params)
    meta = {"config": asdict(model.config), "offset": model.offset.tolist(), "scale": model.scale.tolist(), **extra}
    (d / "model.cfg").write_text(json.dumps(meta, indent=1) + "\n")
    return d


def read_model_meta(directory) -> dict:
    path = Path(directory) / "model.cfg"
    if not path.is_file():
        raise MissingArtifactError(f"missing model config: {path}")
    return json.loads(path.read_text())


def load_model(directory) -> CorrectionModel:
    d = Path(directory)
    meta = read_model_meta(d)
    if not (d / "weights.scnn").is_file():
        raise MissingArtifactError(f"missing model weights: {d / 'weights.scnn'}")
    c = meta["config"]
    cfg = UNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
    weights = ad.load_weights(d / "weights.scnn")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
    expected = {f"{n}.{s}" for n, _, _ in _layer_specs(cfg) for s in "wb"}
    if set(params) != expected:
        raise ConfigurationError(f"{d}: weight names do not match the architecture")
    return CorrectionModel(cfg, params, np.asarray(meta["offset"]), np.asarray(meta["scale"]))


def write_loss_curve(path, result: TrainResult) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train,val\n")
        for e, (t, v) in enumerate(zip(result.train_loss, result.val_loss)):
            fh.write(f"{e},{t:.9g},{v:.9g}\n")
