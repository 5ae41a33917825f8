"""Corotational linear tetrahedral FEM with implicit Euler and Rayleigh damping.

Units are mm, g and s, so forces are in uN and stresses in Pa.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.linalg as la
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import ConfigurationError, DivergedError, GeometryError, SingularMaterialError, SolverError
from .mesh import PHANTOM_EXTENTS, PHANTOM_MASS, TetMesh

PHANTOM_DENSITY = PHANTOM_MASS / float(np.prod(PHANTOM_EXTENTS))  # g / mm^3
GRAVITY = (0.0, 0.0, -9810.0)  # mm / s^2


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 5e3
    poisson_ratio: float = 0.45
    density: float = PHANTOM_DENSITY

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ConfigurationError(f"Young's modulus must be positive, got {self.young_modulus}")
        if not 0 <= self.poisson_ratio < 0.5:
            raise SingularMaterialError(f"Poisson ratio must lie in [0, 0.5), got {self.poisson_ratio}")
        if not self.density > 0:
            raise ConfigurationError("density must be positive")


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1.0 / 300.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.1
    cg_tolerance: float = 1e-8
    cg_max_iters: int = 1000
    divergence_threshold: float = 500.0  # mm
    gravity: Optional[tuple[float, float, float]] = None
    preconditioner: str = "rest"  # or "jacobi"
    implicit_contact: bool = True  # False: penalty force on the right-hand side only

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise ConfigurationError("Rayleigh coefficients must be non-negative")
        if not self.divergence_threshold > 0:
            raise ConfigurationError("divergence threshold must be positive")
        if self.cg_max_iters < 1 or not self.cg_tolerance > 0:
            raise ConfigurationError("CG needs a positive tolerance and iteration budget")
        if self.preconditioner not in ("rest", "jacobi"):
            raise ConfigurationError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class ProbeSphere:
    center: tuple[float, float, float] = (0.0, 0.0, 1e6)
    radius: float = 5.0
    contact_stiffness: float = 1e5
    min_contact_distance: float = 0.5

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("probe radius must be positive")
        if self.min_contact_distance < 0:
            raise ConfigurationError("minimum contact distance must be non-negative")

    def moved_to(self, center) -> "ProbeSphere":
        return replace(self, center=tuple(float(c) for c in center))


@dataclass(frozen=True)
class FemState:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0
    diverged: bool = False

    @classmethod
    def at_rest(cls, mesh: TetMesh, time: float = 0.0) -> "FemState":
        return cls(mesh.vertices.copy(), np.zeros_like(mesh.vertices), time)


def lame_parameters(m: MaterialParams) -> tuple[float, float]:
    E, nu = m.young_modulus, m.poisson_ratio
    if nu >= 0.5:
        raise SingularMaterialError("nu >= 0.5 has no finite first Lame parameter")
    return E * nu / ((1 + nu) * (1 - 2 * nu)), E / (2 * (1 + nu))


def elasticity_matrix(lam: float, mu: float) -> np.ndarray:
    """Isotropic 6x6 Voigt matrix for strains (xx, yy, zz, 2xy, 2yz, 2xz)."""
    D = np.zeros((6, 6))
    D[:3, :3] = lam
    D[np.arange(3), np.arange(3)] += 2 * mu
    D[np.arange(3, 6), np.arange(3, 6)] = mu
    return D


def _shape_gradients(rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the 4 linear shape functions, ``(E, 4, 3)``, and volumes."""
    Dm = np.swapaxes(rest[:, 1:] - rest[:, :1], 1, 2)
    vol = np.linalg.det(Dm) / 6.0
    scale = np.abs(rest - rest.mean(axis=1, keepdims=True)).max(axis=(1, 2))
    if np.any(vol <= 1e-12 * scale**3):
        raise GeometryError("degenerate or inverted tetrahedron")
    Dinv = np.linalg.inv(Dm)
    grads = np.empty(rest.shape)
    grads[:, 1:] = Dinv
    grads[:, 0] = -Dinv.sum(axis=1)
    return grads, vol


def _strain_displacement(grads: np.ndarray) -> np.ndarray:
    E = len(grads)
    B = np.zeros((E, 6, 12))
    gx, gy, gz = grads[..., 0], grads[..., 1], grads[..., 2]
    B[:, 0, 0::3] = gx
    B[:, 1, 1::3] = gy
    B[:, 2, 2::3] = gz
    B[:, 3, 0::3], B[:, 3, 1::3] = gy, gx
    B[:, 4, 1::3], B[:, 4, 2::3] = gz, gy
    B[:, 5, 0::3], B[:, 5, 2::3] = gz, gx
    return B


def element_stiffness_batch(rest: np.ndarray, lam: float, mu: float) -> np.ndarray:
    grads, vol = _shape_gradients(np.asarray(rest, float))
    B = _strain_displacement(grads)
    D = elasticity_matrix(lam, mu)
    return vol[:, None, None] * np.einsum("eki,kl,elj->eij", B, D, B)


def element_stiffness(rest_vertices, lam: float, mu: float) -> np.ndarray:
    """12x12 constant-strain tetrahedron stiffness ``V B^T D B``."""
    rest = np.asarray(rest_vertices, float).reshape(1, 4, 3)
    return element_stiffness_batch(rest, lam, mu)[0]


def _polar_svd(F: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(F)
    det = np.linalg.det(U @ Vt)
    U[..., :, 2] *= np.where(det < 0, -1.0, 1.0)[..., None]
    return U @ Vt


def _cofactor(A: np.ndarray) -> np.ndarray:
    a, b, c = A[:, 0], A[:, 1], A[:, 2]
    out = np.empty_like(A)
    for row, (u, v) in enumerate(((b, c), (c, a), (a, b))):
        out[:, row, 0] = u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1]
        out[:, row, 1] = u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2]
        out[:, row, 2] = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    return out


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Rotation factor of the polar decomposition of each ``(3, 3)`` block, det +1.

    Newton iteration ``R <- (R + R^-T) / 2`` for well-conditioned blocks; SVD
    for inverted, near-singular or slowly converging ones.
    """
    F = np.asarray(F, float)
    shape = F.shape
    F = F.reshape(-1, 3, 3)
    R = F.copy()
    det = np.einsum("ij,ij->i", R[:, 0], _cofactor(R)[:, 0])
    scale = np.einsum("eij,eij->e", F, F) / 3.0
    ok = det > 0.05 * scale**1.5
    Rk = R[ok]
    for _ in range(30 if len(Rk) else 0):
        cof = _cofactor(Rk)
        d = np.einsum("ij,ij->i", Rk[:, 0], cof[:, 0])
        nxt = 0.5 * (Rk + cof / d[:, None, None])
        delta = np.abs(nxt - Rk).max()
        Rk = nxt
        if delta < 1e-15:
            break
    R[ok] = Rk
    bad = ~ok
    bad[ok] = np.abs(np.swapaxes(Rk, 1, 2) @ Rk - np.eye(3)).max(axis=(1, 2)) > 1e-12
    if np.any(bad):
        R[bad] = _polar_svd(F[bad])
    return R.reshape(shape)


def contact_forces(positions: np.ndarray, probe: ProbeSphere) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Penalty forces pushing vertices out of the probe's contact shell.

    Returns ``(forces, contact_ids, normals)``.
    """
    c = np.asarray(probe.center, float)
    d = positions - c
    dist = np.sqrt(np.sum(d * d, axis=1))
    shell = probe.radius + probe.min_contact_distance
    ids = np.flatnonzero(dist < shell)
    forces = np.zeros_like(positions)
    if len(ids) == 0:
        return forces, ids, np.zeros((0, 3))
    n = np.zeros((len(ids), 3))
    ok = dist[ids] > 0
    n[ok] = d[ids[ok]] / dist[ids[ok], None]
    n[~ok] = (0.0, 0.0, 1.0)
    forces[ids] = probe.contact_stiffness * (shell - dist[ids])[:, None] * n
    return forces, ids, n


class FemSimulator:
    """Precomputed element data and sparse assembly pattern for one mesh/material/solver."""

    def __init__(self, mesh: TetMesh, material: MaterialParams, solver: SolverConfig):
        self.mesh, self.material, self.solver = mesh, material, solver
        self.lam, self.mu = lame_parameters(material)
        tets = mesh.tets
        self.rest = mesh.vertices
        rest_e = self.rest[tets]
        grads, vol = _shape_gradients(rest_e)
        self.volumes = vol
        self.Dm_inv = np.linalg.inv(np.swapaxes(rest_e[:, 1:] - rest_e[:, :1], 1, 2))
        self.Ke = element_stiffness_batch(rest_e, self.lam, self.mu)

        n = mesh.n_vertices
        self.ndof = 3 * n
        self.mass = np.zeros(n)
        np.add.at(self.mass, tets.ravel(), np.repeat(material.density * vol / 4.0, 4))
        self.mass_dof = np.repeat(self.mass, 3)

        dofs = (3 * tets[:, :, None] + np.arange(3)).reshape(len(tets), 12)
        self._elem_dofs = dofs.ravel()
        rows = np.repeat(dofs, 12, axis=1).ravel()
        cols = np.tile(dofs, (1, 12)).ravel()
        keys, self._slot = np.unique(rows * self.ndof + cols, return_inverse=True)
        self._rows, self._cols = keys // self.ndof, keys % self.ndof
        self.nnz = len(keys)
        self.indptr = np.searchsorted(self._rows, np.arange(self.ndof + 1))
        self.indices = self._cols.astype(np.int32)

        def slots(r, c):
            return np.searchsorted(keys, r * self.ndof + c)

        dof = np.arange(self.ndof)
        self._diag = slots(dof, dof)
        vb = 3 * np.arange(n)[:, None, None]
        self._vblock = slots(vb + np.arange(3)[:, None], vb + np.arange(3)[None, :])  # (V, 3, 3)

        fixed = np.zeros(n, bool)
        fixed[mesh.fixed_set] = True
        self.fixed = fixed
        fixed_dof = np.repeat(fixed, 3)
        self.fixed_dof = fixed_dof
        self._fixed_slots = fixed_dof[self._rows] | fixed_dof[self._cols]
        self._fixed_diag = self._diag[fixed_dof]
        self.gravity = None if solver.gravity is None else np.asarray(solver.gravity, float)

    @cached_property
    def rest_preconditioner(self) -> Callable[[np.ndarray], np.ndarray]:
        """Exact inverse of the rest-configuration system matrix.

        Banded Cholesky after reverse Cuthill-McKee reordering; the bandwidth of
        the structured grid is small so this is cheaper than a general sparse LU.
        """
        h, alpha, beta = self.solver.dt, self.solver.rayleigh_mass, self.solver.rayleigh_stiffness
        adata = (h * beta + h * h) * self.stiffness_data(np.broadcast_to(np.eye(3), (len(self.mesh.tets), 3, 3)))
        adata[self._diag] += (1 + h * alpha) * self.mass_dof
        adata[self._fixed_slots] = 0.0
        adata[self._fixed_diag] = 1.0
        A = self.matrix(adata)
        perm = reverse_cuthill_mckee(A, symmetric_mode=True)
        Ap = A[perm][:, perm].toarray()
        rows, cols = np.nonzero(Ap)
        bw = int(np.max(np.abs(rows - cols)))
        ab = np.zeros((bw + 1, self.ndof))
        for k in range(bw + 1):
            ab[bw - k, k:] = np.diagonal(Ap, k)
        factor = la.cholesky_banded(ab)

        def apply(r):
            out = np.empty_like(r)
            out[perm] = la.cho_solve_banded((factor, False), r[perm], check_finite=False)
            return out

        return apply

    # -- element-level quantities ------------------------------------------------
    def rotations(self, x: np.ndarray) -> np.ndarray:
        xe = x[self.mesh.tets]
        Ds = np.swapaxes(xe[:, 1:] - xe[:, :1], 1, 2)
        return polar_rotation(Ds @ self.Dm_inv)

    def _local_displacement(self, x, R):
        xe = x[self.mesh.tets]
        xr = xe @ R
        return (xr - self.rest[self.mesh.tets]).reshape(-1, 12)

    def elastic_forces(self, x: np.ndarray, R: Optional[np.ndarray] = None) -> np.ndarray:
        R = self.rotations(x) if R is None else R
        u = self._local_displacement(x, R)
        fl = (self.Ke @ u[:, :, None]).reshape(-1, 4, 3)
        fe = -(fl @ np.swapaxes(R, 1, 2))
        return np.bincount(self._elem_dofs, weights=fe.ravel(), minlength=self.ndof).reshape(-1, 3)

    def elastic_energy(self, x: np.ndarray) -> float:
        u = self._local_displacement(x, self.rotations(x))
        return 0.5 * float(np.einsum("ei,eij,ej->", u, self.Ke, u))

    def kinetic_energy(self, v: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.mass[:, None] * v * v))

    def energy(self, state: FemState) -> float:
        return self.kinetic_energy(state.velocities) + self.elastic_energy(state.positions)

    def stiffness_data(self, R: np.ndarray) -> np.ndarray:
        Rb = np.zeros((len(R), 12, 12))
        for a in range(4):
            Rb[:, 3 * a:3 * a + 3, 3 * a:3 * a + 3] = R
        Kr = Rb @ self.Ke @ np.swapaxes(Rb, 1, 2)
        return np.bincount(self._slot, weights=Kr.ravel(), minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.ndof, self.ndof))

    def stiffness_matrix(self, x: Optional[np.ndarray] = None) -> sp.csr_matrix:
        x = self.rest if x is None else x
        return self.matrix(self.stiffness_data(self.rotations(x)))

    # -- time stepping ---------------------------------------------------------------
    def step(self, state: FemState, probe: Optional[ProbeSphere] = None, gravity=None) -> FemState:
        if state.diverged:
            raise DivergedError("simulation has diverged; refusing to step")
        h = self.solver.dt
        alpha, beta = self.solver.rayleigh_mass, self.solver.rayleigh_stiffness
        x, v = state.positions, state.velocities
        R = self.rotations(x)
        kdata = self.stiffness_data(R)
        K = self.matrix(kdata)

        f = self.elastic_forces(x, R)
        g = self.gravity if gravity is None else np.asarray(gravity, float)
        if g is not None:
            f = f + self.mass[:, None] * g
        adata = (h * beta + h * h) * kdata
        adata[self._diag] += (1 + h * alpha) * self.mass_dof
        vflat = v.ravel()
        rhs = f.ravel() - alpha * self.mass_dof * vflat - (beta + h) * (K @ vflat)
        if probe is not None:
            fc, ids, n = contact_forces(x, probe)
            rhs += fc.ravel()
            if len(ids) and self.solver.implicit_contact:
                kc = probe.contact_stiffness * np.einsum("ni,nj->nij", n, n)
                np.add.at(adata, self._vblock[ids].ravel(), (h * h * kc).ravel())
                kcv = np.einsum("nij,nj->ni", kc, v[ids])
                rhs[(3 * ids[:, None] + np.arange(3)).ravel()] -= h * kcv.ravel()
        rhs *= h
        adata[self._fixed_slots] = 0.0
        adata[self._fixed_diag] = 1.0
        rhs[self.fixed_dof] = 0.0

        if self.solver.preconditioner == "jacobi":
            precond = 1.0 / adata[self._diag]
        else:
            precond = self.rest_preconditioner
        dv = pcg(self.matrix(adata), rhs, precond, self.solver.cg_tolerance, self.solver.cg_max_iters)
        v_new = (vflat + dv).reshape(-1, 3)
        v_new[self.fixed] = 0.0
        x_new = x + h * v_new
        x_new[self.fixed] = self.rest[self.fixed]

        disp = np.abs(x_new - self.rest).max()
        diverged = not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))) or disp > self.solver.divergence_threshold
        return FemState(x_new, v_new, state.time + h, diverged)


def pcg(A: sp.csr_matrix, b: np.ndarray, precond, tol: float, max_iters: int) -> np.ndarray:
    """Preconditioned conjugate gradients from a zero initial guess.

    ``precond`` is either an inverse-diagonal vector (Jacobi) or a callable
    applying an approximate inverse. Raises SolverError on non-convergence or
    when a non-positive curvature direction shows the matrix is not positive
    definite.
    """
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x
    apply = precond if callable(precond) else (lambda r: precond * r)
    r = b.copy()
    z = apply(r)
    p = z.copy()
    rz = r @ z
    for _ in range(max_iters):
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0:
            raise SolverError("non-positive curvature in CG: system is not positive definite", np.linalg.norm(r))
        a = rz / pAp
        x += a * p
        r -= a * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol * bnorm:
            return x
        z = apply(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iters} iterations (residual {rnorm:.3e})", rnorm)


_SIM_CACHE: dict = {}


def simulator(mesh: TetMesh, material: MaterialParams, solver: SolverConfig) -> FemSimulator:
    key = (id(mesh), material, solver)
    sim = _SIM_CACHE.get(key)
    if sim is None or sim.mesh is not mesh:
        if len(_SIM_CACHE) > 32:
            _SIM_CACHE.clear()
        sim = _SIM_CACHE[key] = FemSimulator(mesh, material, solver)
    return sim


def step(state: FemState, mesh: TetMesh, material: MaterialParams, solver: SolverConfig,
         probe: Optional[ProbeSphere] = None, external=None) -> FemState:
    """One implicit Euler step; ``external`` is an optional gravity vector."""
    return simulator(mesh, material, solver).step(state, probe, external)


# -- replay -------------------------------------------------------------------------------

@dataclass
class ReplayResult:
    frame_ids: list[int]
    times: list[float]
    positions: list[Optional[np.ndarray]]
    diverged: bool = False
    diverged_at_frame: Optional[int] = None
    material: Optional[MaterialParams] = None
    solver: Optional[SolverConfig] = None

    def present(self):
        return [(f, p) for f, p in zip(self.frame_ids, self.positions) if p is not None]

    def __iter__(self):
        return iter(zip(self.frame_ids, self.positions))


FrameHook = Callable[[int, FemState], Optional[np.ndarray]]


def run_replay(mesh: TetMesh, material: MaterialParams, solver: SolverConfig, probe_template: ProbeSphere,
               trajectory, schedule, on_frame: Optional[FrameHook] = None) -> ReplayResult:
    """Drive the probe along ``trajectory`` and record positions at every scheduled frame.

    ``on_frame(frame_id, state)`` may return replacement positions that are
    written into the state (velocities kept) before stepping continues.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    times = np.asarray(schedule.frame_times, float)
    if len(times) == 0:
        raise ValueError("empty frame schedule")
    t0 = float(trajectory.times[0])
    if times[0] < t0 - 1e-9 or times[-1] > trajectory.times[-1] + 1e-9:
        raise ValueError("frame schedule extends beyond the trajectory")
    sim = simulator(mesh, material, solver)
    dt = solver.dt
    targets = np.rint((times - t0) / dt).astype(np.int64)
    result = ReplayResult([], [], [], material=material, solver=solver)
    state = FemState.at_rest(mesh, t0)
    n = 0
    for fid, (t, target) in enumerate(zip(times, targets)):
        while n < target and not state.diverged:
            n += 1
            probe = probe_template.moved_to(trajectory.interpolate(t0 + n * dt))
            try:
                state = sim.step(state, probe)
            except SolverError:
                state = replace(state, diverged=True)
            state = replace(state, time=t0 + n * dt)
        result.frame_ids.append(fid)
        result.times.append(float(t))
        if state.diverged:
            if not result.diverged:
                result.diverged, result.diverged_at_frame = True, fid
            result.positions.append(None)
            continue
        if on_frame is not None:
            new = on_frame(fid, state)
            if new is not None:
                state = replace(state, positions=np.asarray(new, float))
        result.positions.append(state.positions.copy())
    return result


def write_run(result: ReplayResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frames.csv", "w") as fh:
        fh.write("frame_id,time\n")
        for fid, t, pos in zip(result.frame_ids, result.times, result.positions):
            if pos is None:
                continue
            fh.write(f"{fid},{t:.17g}\n")
            np.savetxt(out / f"frame_{fid:06d}.txt", pos, fmt="%.17g")
    meta = {
        "material": asdict(result.material) if result.material else None,
        "solver": asdict(result.solver) if result.solver else None,
        "diverged": result.diverged,
        "diverged_at_frame": result.diverged_at_frame,
        "n_frames": len(result.frame_ids),
        "frame_times": [float(t) for t in result.times],
    }
    (out / "run_meta").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out


def read_run(run_dir) -> ReplayResult:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run_meta").read_text())
    rows = np.loadtxt(run_dir / "frames.csv", delimiter=",", skiprows=1, ndmin=2)
    present = {int(f) for f, _ in rows}
    n = meta["n_frames"]
    res = ReplayResult([], [], [], meta["diverged"], meta["diverged_at_frame"])
    if meta.get("material"):
        res.material = MaterialParams(**meta["material"])
    if meta.get("solver"):
        s = dict(meta["solver"])
        if s.get("gravity") is not None:
            s["gravity"] = tuple(s["gravity"])
        res.solver = SolverConfig(**s)
    for fid in range(n):
        res.frame_ids.append(fid)
        res.times.append(meta["frame_times"][fid])
        res.positions.append(np.loadtxt(run_dir / f"frame_{fid:06d}.txt") if fid in present else None)
    return res
