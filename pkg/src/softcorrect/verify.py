"""Quick self-checks against independent oracles, run by ``softcorrect verify``."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .correction import UNetConfig, build, forward
from .fem import elasticity_matrix, element_stiffness, lame_parameters, MaterialParams
from .mesh import GridMeshSpec, build_grid_mesh
from .pointcloud import chamfer_one_directional, hausdorff
from .registration import fit_rigid, rotation_about


def _stiffness_oracle(x: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """Volume * B^T D B with gradients from the inverse of [1 x y z] (barycentric form)."""
    A = np.hstack([np.ones((4, 1)), x])
    grads = np.linalg.inv(A)[1:].T  # (4, 3): row a is grad N_a
    vol = abs(np.linalg.det(A)) / 6.0
    B = np.zeros((6, 12))
    for a, (gx, gy, gz) in enumerate(grads):
        B[:, 3 * a:3 * a + 3] = [[gx, 0, 0], [0, gy, 0], [0, 0, gz], [gy, gx, 0], [0, gz, gy], [gz, 0, gx]]
    return vol * B.T @ elasticity_matrix(lam, mu) @ B


def check_element_stiffness(rng) -> tuple[bool, str]:
    lam, mu = lame_parameters(MaterialParams())
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(4, 3)) * 10
        det = np.linalg.det(np.hstack([np.ones((4, 1)), x]))
        if abs(det) < 1.0:
            continue
        if det < 0:
            x = x[[0, 2, 1, 3]]  # element_stiffness expects positive orientation
        K, ref = element_stiffness(x, lam, mu), _stiffness_oracle(x, lam, mu)
        worst = max(worst, np.abs(K - ref).max() / np.abs(ref).max())
    return worst < 1e-10, f"max rel err {worst:.2e}"


def check_conv_gradient(rng) -> tuple[bool, str]:
    x = rng.normal(size=(2, 4, 3))
    w = ad.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    up = rng.normal(size=(3, 4, 3))
    f = lambda: float(np.sum(ad.conv(ad.Tensor(x), w).data * up))
    out = ad.sum_all(ad.mul(ad.conv(ad.Tensor(x), w), up))
    out.backward()
    num = np.zeros_like(w.data)
    for idx in np.ndindex(w.shape):
        old = w.data[idx]
        w.data[idx] = old + 1e-5
        hi = f()
        w.data[idx] = old - 1e-5
        lo = f()
        w.data[idx] = old
        num[idx] = (hi - lo) / 2e-5
    err = np.abs(num - w.grad).max() / np.abs(num).max()
    return err < 1e-6, f"rel err {err:.2e}"


def check_metrics(rng) -> tuple[bool, str]:
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(45, 3))
    d = np.array([[np.sqrt(np.sum((p - q) ** 2)) for q in b] for p in a]).min(axis=1)
    ok = chamfer_one_directional(a, b) == float(np.mean(d)) and hausdorff(a, b) == float(np.max(d))
    return ok, "exact match" if ok else "mismatch against brute force"


def check_clamp(rng) -> tuple[bool, str]:
    mesh = build_grid_mesh(GridMeshSpec())
    cfg = UNetConfig.for_mesh(mesh, 2)
    bound = cfg.clamp
    worst = 0.0
    for s in range(3):
        m = build(cfg, mesh.vertices, seed=s)
        for p in m.params.values():
            p.data = p.data * 5.0  # push the head into saturation
        pos = mesh.vertices + rng.normal(scale=20.0, size=mesh.vertices.shape)
        g = forward(m, pos, rng.normal(scale=50.0, size=3)).data
        worst = max(worst, float((np.abs(g).reshape(3, -1).max(axis=1) / bound).max()))
    return worst <= 1.0, f"max |d|/bound {worst:.4f}"


def check_rigid(rng) -> tuple[bool, str]:
    worst = 0.0
    src = np.array([[0, 0, 0], [68.7, 0, 0], [0, 35.8, 0], [68.7, 35.8, 0]], float)
    for _ in range(20):
        R = rotation_about(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
        t = rng.normal(scale=100, size=3)
        T = fit_rigid(src, src @ R.T + t)
        worst = max(worst, np.abs(T.rotation - R).max(), np.abs(T.translation - t).max())
    return worst < 1e-9, f"max err {worst:.2e}"


CHECKS = [
    ("element stiffness vs direct integration", check_element_stiffness),
    ("conv weight gradient vs central differences", check_conv_gradient),
    ("Chamfer / Hausdorff vs brute force", check_metrics),
    ("correction clamp bound", check_clamp),
    ("rigid fit from four corners", check_rigid),
]


def run_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
