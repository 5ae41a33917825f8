"""Structured tetrahedral block mesh and surface super-sampling.

Vertices live on a regular ``nx x ny x nz`` lattice with id
``i + nx * (j + ny * k)``; every hexahedral cell is split into the same six
tetrahedra (Kuhn decomposition along the cell's main diagonal), which keeps
the split conforming across cells without parity alternation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .pointcloud import PointCloud

# phantom block used throughout the experiments (mm, g)
PHANTOM_EXTENTS = (68.7, 35.8, 39.3)
PHANTOM_NODES = (13, 5, 5)
PHANTOM_MASS = 104.01


@dataclass(frozen=True)
class GridMeshSpec:
    node_counts: tuple[int, int, int] = PHANTOM_NODES
    extents: tuple[float, float, float] = PHANTOM_EXTENTS
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.node_counts) != 3 or len(self.extents) != 3 or len(self.origin) != 3:
            raise ConfigurationError("grid spec needs three node counts, extents and origin components")
        if any(int(n) != n or n < 2 for n in self.node_counts):
            raise ConfigurationError(f"node counts must be integers >= 2, got {self.node_counts}")
        if any(not np.isfinite(e) or e <= 0 for e in self.extents):
            raise ConfigurationError(f"extents must be positive, got {self.extents}")

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extents, float) / (np.asarray(self.node_counts) - 1)


def _kuhn_tets() -> list[tuple[int, int, int, int]]:
    """Six tets of the unit cube as corner ids ``a + 2b + 4c``, all positively oriented."""
    corners = np.array([[a, b, c] for c in (0, 1) for b in (0, 1) for a in (0, 1)], float)
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, int)]
        for ax in perm:
            nxt = path[-1].copy()
            nxt[ax] = 1
            path.append(nxt)
        ids = [int(p[0] + 2 * p[1] + 4 * p[2]) for p in path]
        x = corners[ids]
        if np.linalg.det(x[1:] - x[0]) < 0:
            ids[2], ids[3] = ids[3], ids[2]
        tets.append(tuple(ids))
    return tets


_CELL_TETS = _kuhn_tets()


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedral block mesh with grid bookkeeping.

    ``surface_quads`` rows are ``(a, b, c, d)`` ordered so that the bilinear
    patch is ``(1-u)(1-v) a + u(1-v) b + uv c + (1-u)v d``.
    """

    spec: GridMeshSpec
    vertices: np.ndarray
    tets: np.ndarray
    grid_index: np.ndarray  # (V, 3) lattice coords of each vertex
    fixed_set: np.ndarray
    top_set: np.ndarray
    surface_quads: np.ndarray
    quad_axes: np.ndarray  # (Q, 2) lattice axes spanned by u and v
    quad_faces: np.ndarray  # (Q,) face label, see FACE_NAMES
    _samplers: dict = field(default_factory=dict, repr=False, compare=False)

    FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.spec.node_counts)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def spacing(self) -> np.ndarray:
        return self.spec.spacing

    def vertex_id(self, i, j, k):
        nx, ny, _ = self.shape
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    @cached_property
    def rest_volumes(self) -> np.ndarray:
        x = self.vertices[self.tets]
        return np.linalg.det(x[:, 1:] - x[:, :1]) / 6.0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.surface_quads)

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        """Per-vertex ``(V, ...)`` array reshaped to ``(nx, ny, nz, ...)``."""
        nx, ny, nz = self.shape
        v = np.asarray(values)
        return v.reshape((nz, ny, nx) + v.shape[1:]).transpose((2, 1, 0) + tuple(range(3, v.ndim + 2)))

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        g = np.asarray(grid)
        nx, ny, nz = self.shape
        return g.transpose((2, 1, 0) + tuple(range(3, g.ndim))).reshape((nx * ny * nz,) + g.shape[3:])

    def sampler(self, factor: int, faces: str = "all") -> "SurfaceSampler":
        key = (int(factor), faces)
        if key not in self._samplers:
            self._samplers[key] = SurfaceSampler.build(self, factor, faces)
        return self._samplers[key]


def build_grid_mesh(spec: GridMeshSpec) -> TetMesh:
    nx, ny, nz = (int(n) for n in spec.node_counts)
    h = spec.spacing
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    grid_index = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    vertices = np.asarray(spec.origin, float) + grid_index * h

    def vid(i, j, k):
        return i + nx * (j + ny * k)

    ci, cj, ck = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    corner = np.stack(
        [vid(ci + a, cj + b, ck + c) for c in (0, 1) for b in (0, 1) for a in (0, 1)], axis=1
    )
    tets = np.concatenate([corner[:, list(t)] for t in _CELL_TETS], axis=0)
    # order tets cell by cell
    n_cells = len(ci)
    order = np.arange(len(tets)).reshape(len(_CELL_TETS), n_cells).T.ravel()
    tets = tets[order]

    quads, axes, faces = [], [], []
    n = (nx, ny, nz)
    for normal in range(3):
        a, b = [ax for ax in range(3) if ax != normal]
        for side in (0, 1):
            ua, ub = np.meshgrid(np.arange(n[a] - 1), np.arange(n[b] - 1), indexing="ij")
            ua, ub = ua.ravel(), ub.ravel()
            fixed = np.full_like(ua, 0 if side == 0 else n[normal] - 1)

            def corner_id(da, db):
                idx = [None, None, None]
                idx[a], idx[b], idx[normal] = ua + da, ub + db, fixed
                return vid(*idx)

            q = np.stack([corner_id(0, 0), corner_id(1, 0), corner_id(1, 1), corner_id(0, 1)], axis=1)
            ax = (a, b)
            # (a, b, normal) is a cyclic permutation for normals 0 and 2 only
            outward_ab = (normal != 1) == (side == 1)
            if not outward_ab:
                q = q[:, [0, 3, 2, 1]]
                ax = (b, a)
            quads.append(q)
            axes.append(np.tile(ax, (len(q), 1)))
            faces.append(np.full(len(q), 2 * normal + side))

    mesh = TetMesh(
        spec=spec,
        vertices=vertices,
        tets=tets.astype(np.int64),
        grid_index=grid_index,
        fixed_set=np.flatnonzero(grid_index[:, 2] == 0),
        top_set=np.flatnonzero(grid_index[:, 2] == nz - 1),
        surface_quads=np.concatenate(quads).astype(np.int64),
        quad_axes=np.concatenate(axes),
        quad_faces=np.concatenate(faces),
    )
    for arr in (mesh.vertices, mesh.tets, mesh.grid_index, mesh.fixed_set, mesh.top_set, mesh.surface_quads):
        arr.setflags(write=False)
    return mesh


@dataclass(frozen=True, eq=False)
class SurfaceSampler:
    """Fixed bilinear sampling pattern of the boundary quads.

    ``weights`` is a sparse ``(M, V)`` matrix so samples are ``weights @ positions``
    and gradients flow back through ``weights.T``.
    """

    factor: int
    keys: np.ndarray  # (M, 3) integer lattice coordinates at the refined resolution
    weights: sp.csr_matrix
    faces: str

    @classmethod
    def build(cls, mesh: TetMesh, factor: int, faces: str = "all") -> "SurfaceSampler":
        if int(factor) != factor or factor < 1:
            raise ValueError(f"super-sampling factor must be an integer >= 1, got {factor}")
        factor = int(factor)
        if faces == "all":
            sel = np.arange(len(mesh.surface_quads))
        elif faces == "top":
            sel = np.flatnonzero(mesh.quad_faces == 5)
        else:
            raise ValueError(f"unknown face selection {faces!r}")
        quads = mesh.surface_quads[sel]
        axes = mesh.quad_axes[sel]
        s = np.arange(factor + 1)
        su, sv = np.meshgrid(s, s, indexing="ij")
        su, sv = su.ravel(), sv.ravel()
        u, v = su / factor, sv / factor
        w = np.stack([(1 - u) * (1 - v), u * (1 - v), u * v, (1 - u) * v], axis=1)  # (P, 4)

        base = mesh.grid_index[quads[:, 0]] * factor  # (Q, 3)
        ea = np.eye(3, dtype=np.int64)[axes[:, 0]]
        eb = np.eye(3, dtype=np.int64)[axes[:, 1]]
        keys = base[:, None, :] + su[None, :, None] * ea[:, None, :] + sv[None, :, None] * eb[:, None, :]
        keys = keys.reshape(-1, 3)
        cols = np.repeat(quads[:, None, :], len(u), axis=1).reshape(-1, 4)
        vals = np.broadcast_to(w, (len(quads), len(u), 4)).reshape(-1, 4)

        nx, ny, _ = mesh.shape
        fx, fy = (nx - 1) * factor + 1, (ny - 1) * factor + 1
        flat = keys[:, 0] + fx * (keys[:, 1] + fy * keys[:, 2])
        _, first = np.unique(flat, return_index=True)
        keys, cols, vals = keys[first], cols[first], vals[first]
        rows = np.repeat(np.arange(len(first)), 4)
        W = sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(first), mesh.n_vertices))
        W.eliminate_zeros()
        return cls(factor=factor, keys=keys, weights=W, faces=faces)

    def __len__(self) -> int:
        return self.weights.shape[0]

    def sample(self, positions: np.ndarray) -> np.ndarray:
        return self.weights @ np.asarray(positions, float)


def supersample_surface(mesh: TetMesh, current_positions: np.ndarray, factor: int, faces: str = "all") -> PointCloud:
    positions = np.asarray(current_positions, float)
    if positions.shape != (mesh.n_vertices, 3):
        raise ValueError(f"expected positions of shape {(mesh.n_vertices, 3)}, got {positions.shape}")
    return PointCloud(mesh.sampler(factor, faces).sample(positions))


def box_surface_sample_count(node_counts, factor: int) -> int:
    """Number of distinct refined lattice points on the boundary of a box grid."""
    n = [(c - 1) * factor + 1 for c in node_counts]
    inner = np.prod([max(c - 2, 0) for c in n])
    return int(np.prod(n) - inner)


def save_mesh(mesh: TetMesh, path) -> None:
    nx, ny, nz = mesh.shape
    lines = [f"tetmesh v1 {nx} {ny} {nz}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += ["t {} {} {} {}".format(*t) for t in mesh.tets]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> TetMesh:
    """Read a mesh written by :func:`save_mesh`.

    The lattice is rebuilt from the header and the stored corner positions;
    fixed and top sets are derived from the grid.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"mesh file not found: {path}")
    rows = path.read_text().split("\n")
    head = rows[0].split()
    if head[:2] != ["tetmesh", "v1"] or len(head) != 5:
        raise ConfigurationError(f"{path}: not a 'tetmesh v1' file")
    nx, ny, nz = (int(h) for h in head[2:])
    verts = np.array([[float(c) for c in r.split()[1:]] for r in rows[1:] if r.startswith("v ")])
    tets = np.array([[int(c) for c in r.split()[1:]] for r in rows[1:] if r.startswith("t ")])
    if len(verts) != nx * ny * nz:
        raise ConfigurationError(f"{path}: expected {nx * ny * nz} vertices, found {len(verts)}")
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    mesh = build_grid_mesh(GridMeshSpec((nx, ny, nz), tuple(hi - lo), tuple(lo)))
    if not np.allclose(mesh.vertices, verts, rtol=0, atol=1e-6 * max(hi - lo)):
        raise ConfigurationError(f"{path}: vertices do not form a regular grid")
    if tets.shape != mesh.tets.shape or not np.array_equal(tets, mesh.tets):
        raise ConfigurationError(f"{path}: tetrahedra do not match the structured decomposition")
    return mesh
