import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from oracles import barycentric_gradients, random_rotation, random_tet, stiffness_by_polarization, stiffness_symbolic
from softcorrect.errors import DivergedError, GeometryError, SingularMaterialError, SolverError
from softcorrect.fem import (FemSimulator, FemState, MaterialParams, ProbeSphere, SolverConfig, contact_forces,
                             elasticity_matrix, element_stiffness, lame_parameters, pcg, polar_rotation, read_run,
                             run_replay, write_run)
from softcorrect.mesh import GridMeshSpec, build_grid_mesh
from softcorrect.replay import FrameSchedule, KinematicsTrajectory

FAR = ProbeSphere(center=(0.0, 0.0, 1e6))


def test_lame_examples():
    lam, mu = lame_parameters(MaterialParams(5e3, 0.45))
    assert lam == pytest.approx(5e3 * 0.45 / (1.45 * 0.1), rel=1e-12)
    assert lam == pytest.approx(15517.241, abs=1e-3)
    assert mu == pytest.approx(1724.138, abs=1e-3)
    assert lame_parameters(MaterialParams(1.0, 0.0)) == (0.0, 0.5)


@pytest.mark.parametrize("nu", [0.5, 0.6])
def test_incompressible_rejected(nu):
    with pytest.raises(SingularMaterialError):
        MaterialParams(5e3, nu)


def test_unit_tet_symbolic():
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    K = element_stiffness(x, 0.0, 1.0)
    ref = stiffness_symbolic(x, 0.0, 1.0)
    assert np.abs(K - ref).max() <= 1e-10 * np.abs(ref).max()


def test_skewed_tet_symbolic():
    x = np.array([[0.3, -0.2, 0.1], [2.0, 0.4, -0.3], [0.5, 1.7, 0.2], [-0.1, 0.6, 1.4]])
    K = element_stiffness(x, 2.5, 0.7)
    ref = stiffness_symbolic(x, 2.5, 0.7)
    assert np.abs(K - ref).max() <= 1e-10 * np.abs(ref).max()


def test_random_tets_polarization(rng):
    lam, mu = lame_parameters(MaterialParams())
    for _ in range(50):
        x = random_tet(rng)
        K, ref = element_stiffness(x, lam, mu), stiffness_by_polarization(x, lam, mu)
        assert np.abs(K - ref).max() <= 1e-10 * np.abs(ref).max()


@given(st.integers(0, 2**31))
def test_stiffness_properties(seed):
    rng = np.random.default_rng(seed)
    x = random_tet(rng)
    K = element_stiffness(x, 1.3, 0.8)
    assert np.abs(K - K.T).max() <= 1e-12 * np.abs(K).max()
    ev = np.linalg.eigvalsh(K)
    assert ev.min() >= -1e-9 * ev.max()
    # rigid translations and infinitesimal rotations carry no energy
    for t in np.eye(3):
        assert np.abs(K @ np.tile(t, 4)).max() <= 1e-9 * np.abs(K).max()
    w = rng.normal(size=3)
    rot = np.cross(w, x).ravel()
    assert np.abs(K @ rot).max() <= 1e-9 * np.abs(K).max() * np.abs(rot).max()
    # constant-strain scaling law: K(s x) = s K(x)
    s = rng.uniform(0.2, 5.0)
    np.testing.assert_allclose(element_stiffness(s * x, 1.3, 0.8), s * K, rtol=1e-10, atol=1e-10 * np.abs(K).max())


def test_degenerate_tet():
    x = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float)
    with pytest.raises(GeometryError):
        element_stiffness(x, 1.0, 1.0)


def test_elasticity_matrix_against_tensor_form(rng):
    lam, mu = 2.0, 3.0
    D = elasticity_matrix(lam, mu)
    eps = rng.normal(size=(3, 3))
    eps = 0.5 * (eps + eps.T)
    voigt = np.array([eps[0, 0], eps[1, 1], eps[2, 2], 2 * eps[0, 1], 2 * eps[1, 2], 2 * eps[0, 2]])
    energy = 0.5 * lam * np.trace(eps) ** 2 + mu * np.sum(eps * eps)
    assert 0.5 * voigt @ D @ voigt == pytest.approx(energy, rel=1e-12)


@given(st.integers(0, 2**31))
def test_polar_rotation(seed):
    rng = np.random.default_rng(seed)
    R0 = random_rotation(rng)
    S = rng.normal(size=(3, 3)) * 0.3
    S = S @ S.T + np.eye(3) * 0.2
    R = polar_rotation((R0 @ S)[None])[0]
    np.testing.assert_allclose(R, R0, atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_polar_rotation_of_reflection_is_proper():
    F = np.diag([1.0, 1.0, -0.5])[None]
    R = polar_rotation(F)[0]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_contact_law():
    x = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 0.0, 6.0]])
    probe = ProbeSphere(center=(0.0, 0.0, 4.5), radius=5.0, contact_stiffness=1e5, min_contact_distance=0.5)
    f, ids, n = contact_forces(x, probe)
    # vertex 0 is 4.5 mm from the centre: 1 mm inside the 5.5 mm shell
    assert list(ids) == [0, 2]
    np.testing.assert_allclose(f[0], [0.0, 0.0, -1e5 * 1.0], rtol=1e-12)
    np.testing.assert_allclose(f[2], [0.0, 0.0, 1e5 * 4.0], rtol=1e-12)
    assert np.all(f[1] == 0)


def _dense_system(mesh, mat):
    """Global K and lumped M from the polarization oracle, assembled by loops."""
    lam, mu = lame_parameters(mat)
    n = 3 * mesh.n_vertices
    K = np.zeros((n, n))
    M = np.zeros(n)
    for t in mesh.tets:
        x = mesh.vertices[t]
        Ke = stiffness_by_polarization(x, lam, mu)
        dofs = (3 * t[:, None] + np.arange(3)).ravel()
        K[np.ix_(dofs, dofs)] += Ke
        _, vol = barycentric_gradients(x)
        M[dofs] += mat.density * abs(vol) / 4.0
    return K, M


@pytest.fixture(scope="module")
def tiny():
    mesh = build_grid_mesh(GridMeshSpec((3, 3, 3), (12.0, 10.0, 8.0)))
    mat = MaterialParams(5e3, 0.45, 1e-3)
    return mesh, mat


def test_global_stiffness_matches_oracle(tiny):
    mesh, mat = tiny
    sim = FemSimulator(mesh, mat, SolverConfig())
    K = sim.stiffness_matrix().toarray()
    ref, M = _dense_system(mesh, mat)
    assert np.abs(K - ref).max() <= 1e-10 * np.abs(ref).max()
    assert np.abs(K - K.T).max() <= 1e-9 * np.abs(K).max()
    np.testing.assert_allclose(sim.mass_dof, M, rtol=1e-12)


def _free_modes(mesh, mat):
    K, M = _dense_system(mesh, mat)
    free = np.flatnonzero(~np.repeat(np.isin(np.arange(mesh.n_vertices), mesh.fixed_set), 3))
    w2, phi = sla.eigh(K[np.ix_(free, free)], np.diag(M[free]))
    return free, w2, phi


def test_modal_implicit_step_from_velocity(tiny):
    """Along a generalized eigenvector the update is the scalar implicit formula."""
    mesh, mat = tiny
    solver = SolverConfig(cg_tolerance=1e-14)
    sim = FemSimulator(mesh, mat, solver)
    free, w2, phi = _free_modes(mesh, mat)
    h, a, b = solver.dt, solver.rayleigh_mass, solver.rayleigh_stiffness
    for mode in (0, 5, len(w2) - 1):
        v0 = np.zeros(3 * mesh.n_vertices)
        v0[free] = phi[:, mode]
        state = FemState(mesh.vertices.copy(), v0.reshape(-1, 3), 0.0)
        v1 = sim.step(state, FAR).velocities.ravel()
        expected = v0 / (1 + h * a + h * w2[mode] * (b + h))
        assert np.abs(v1 - expected).max() <= 1e-8 * np.abs(expected).max()


def test_modal_implicit_step_from_displacement(tiny):
    mesh, mat = tiny
    solver = SolverConfig(cg_tolerance=1e-14)
    sim = FemSimulator(mesh, mat, solver)
    free, w2, phi = _free_modes(mesh, mat)
    h, a, b = solver.dt, solver.rayleigh_mass, solver.rayleigh_stiffness
    mode, eps = 3, 1e-7
    u = np.zeros(3 * mesh.n_vertices)
    u[free] = eps * phi[:, mode] / np.abs(phi[:, mode]).max()
    state = FemState(mesh.vertices + u.reshape(-1, 3), np.zeros((mesh.n_vertices, 3)), 0.0)
    v1 = sim.step(state, FAR).velocities.ravel()
    expected = -h * w2[mode] * u / (1 + h * a + h * w2[mode] * (b + h))
    # corotational forces agree with linear ones to first order in the displacement
    assert np.abs(v1 - expected).max() <= 1e-6 * np.abs(expected).max()


def test_rest_is_fixed_point(phantom):
    sim = FemSimulator(phantom, MaterialParams(), SolverConfig())
    s = FemState.at_rest(phantom)
    for _ in range(3):
        s = sim.step(s, FAR)
    assert np.abs(s.positions - phantom.vertices).max() < 1e-12


def _patch_solution(mesh, mat, strain):
    """Static solve with ``u = strain @ X`` on every boundary vertex."""
    sim = FemSimulator(mesh, mat, SolverConfig())
    K = sim.stiffness_matrix().tocsr()
    X = mesh.vertices
    u_exact = X @ strain.T
    boundary = np.zeros(mesh.n_vertices, bool)
    boundary[mesh.boundary_vertices] = True
    b = np.flatnonzero(np.repeat(boundary, 3))
    i = np.flatnonzero(~np.repeat(boundary, 3))
    u = u_exact.ravel().copy()
    Kii = K[i][:, i].toarray()
    u[i] = np.linalg.solve(Kii, -K[i][:, b] @ u[b])
    return sim, u.reshape(-1, 3), u_exact


def test_patch_test_phantom(phantom):
    mat = MaterialParams()
    lam, mu = lame_parameters(mat)
    strain = np.array([[1.0, 0.3, 0.0], [0.3, -0.4, 0.2], [0.0, 0.2, 0.5]]) * 1e-4
    sim, u, u_exact = _patch_solution(phantom, mat, strain)
    assert np.abs(u - u_exact).max() <= 1e-6 * np.abs(u_exact).max()
    sigma = lam * np.trace(strain) * np.eye(3) + 2 * mu * strain
    for t in phantom.tets[::7]:
        grads, _ = barycentric_gradients(phantom.vertices[t])
        H = u[t].T @ grads
        s = lam * np.trace(H) * np.eye(3) + mu * (H + H.T)
        assert np.abs(s - sigma).max() <= 1e-6 * np.abs(sigma).max()
    # the corotational internal forces vanish at interior vertices for a pure stretch
    f = sim.elastic_forces(phantom.vertices + u_exact)
    interior = np.setdiff1d(np.arange(phantom.n_vertices), phantom.boundary_vertices)
    assert np.abs(f[interior]).max() <= 1e-6 * np.abs(f).max()


def _energy_trace(mesh, dt, steps, seed=0):
    sim = FemSimulator(mesh, MaterialParams(), SolverConfig(dt=dt))
    rng = np.random.default_rng(seed)
    x = mesh.vertices + rng.normal(scale=0.5, size=mesh.vertices.shape)
    x[mesh.fixed_set] = mesh.vertices[mesh.fixed_set]
    v = rng.normal(scale=5.0, size=x.shape)
    v[mesh.fixed_set] = 0
    s = FemState(x, v, 0.0)
    energies = [sim.energy(s)]
    for _ in range(steps):
        s = sim.step(s, FAR)
        energies.append(sim.energy(s))
        assert np.abs(s.positions[mesh.fixed_set] - mesh.vertices[mesh.fixed_set]).max() < 1e-12
    return np.array(energies)


@pytest.mark.parametrize("dt", [1 / 300, 1 / 30])
def test_energy_non_increasing(dt, small_mesh):
    e = _energy_trace(small_mesh, dt, 200)
    assert np.all(np.diff(e) <= 1e-9 * e[0])
    assert e[-1] < e[0]


def test_divergence_flag_is_sticky(small_mesh):
    sim = FemSimulator(small_mesh, MaterialParams(), SolverConfig(divergence_threshold=1e-3))
    x = small_mesh.vertices.copy()
    x[small_mesh.top_set] += [0.0, 0.0, 1.0]
    s = sim.step(FemState(x, np.zeros_like(x), 0.0), FAR)
    assert s.diverged
    with pytest.raises(DivergedError):
        sim.step(s, FAR)


def test_pcg_matches_direct(rng):
    A = rng.normal(size=(30, 30))
    A = A @ A.T + 30 * np.eye(30)
    from scipy.sparse import csr_matrix

    b = rng.normal(size=30)
    x = pcg(csr_matrix(A), b, 1.0 / np.diag(A), 1e-12, 200)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-9)
    with pytest.raises(SolverError):
        pcg(csr_matrix(A), b, 1.0 / np.diag(A), 1e-14, 1)
    with pytest.raises(SolverError):
        pcg(csr_matrix(-A), b, np.ones(30), 1e-12, 50)


def test_jacobi_and_rest_preconditioners_agree(small_mesh):
    x0 = small_mesh.vertices.copy()
    x0[small_mesh.top_set] += [0.3, -0.2, -0.5]
    out = []
    for pc in ("rest", "jacobi"):
        sim = FemSimulator(small_mesh, MaterialParams(), SolverConfig(preconditioner=pc, cg_tolerance=1e-12))
        out.append(sim.step(FemState(x0, np.zeros_like(x0), 0.0), FAR).positions)
    np.testing.assert_allclose(out[0], out[1], atol=1e-9)


def _poke(mesh, depth, T=1.0, rate=300):
    t = np.arange(int(T * rate) + 1) / rate
    top = mesh.vertices[mesh.vertex_id(6, 2, 4)]
    s = 0.5 - 0.5 * np.cos(2 * np.pi * t / T)
    start = top + [0, 0, 5.5 + 5.0]
    pos = start + np.outer(s * (5.0 + depth), [0, 0, -1])
    return KinematicsTrajectory(t, pos), FrameSchedule(tuple(np.arange(0, T + 1e-9, 1 / 30)))


def test_far_trajectory_keeps_rest(phantom):
    traj = KinematicsTrajectory([0.0, 1.0], [[0, 0, 500.0], [0, 0, 500.0]])
    run = run_replay(phantom, MaterialParams(), SolverConfig(), ProbeSphere(), traj, FrameSchedule((0.0, 0.5, 1.0)))
    for p in run.positions:
        assert np.abs(p - phantom.vertices).max() < 1e-12


def test_softer_material_deforms_more(phantom):
    traj, sched = _poke(phantom, 4.0)
    peak = {}
    for E in (5e3, 1e1):
        run = run_replay(phantom, MaterialParams(E), SolverConfig(), ProbeSphere(), traj, sched)
        peak[E] = max(np.abs(p - phantom.vertices)[phantom.top_set].max() for p in run.positions)
    assert peak[1e1] > peak[5e3] > 0.5


def test_replay_deterministic_and_roundtrip(tmp_path, phantom):
    traj, sched = _poke(phantom, 3.0, T=0.4)
    a = run_replay(phantom, MaterialParams(), SolverConfig(), ProbeSphere(), traj, sched)
    b = run_replay(phantom, MaterialParams(), SolverConfig(), ProbeSphere(), traj, sched)
    for p, q in zip(a.positions, b.positions):
        assert np.array_equal(p, q)
        assert np.abs(p[phantom.fixed_set] - phantom.vertices[phantom.fixed_set]).max() < 1e-12
    write_run(a, tmp_path / "run")
    c = read_run(tmp_path / "run")
    assert c.times == a.times and c.material == a.material and c.solver == a.solver
    for p, q in zip(a.positions, c.positions):
        assert np.array_equal(p, q)


def test_replay_midpoint_probe(phantom):
    """Two-sample trajectory: the substep at the midpoint sees the midpoint centre."""
    seen = []
    traj = KinematicsTrajectory([0.0, 0.1], [[0, 0, 300.0], [10, 0, 300.0]])
    sched = FrameSchedule((0.0, 0.05))
    run = run_replay(phantom, MaterialParams(), SolverConfig(dt=0.05), ProbeSphere(), traj, sched,
                     on_frame=lambda f, s: seen.append(s.time))
    assert seen == [0.0, 0.05]
    assert traj.interpolate(0.05).tolist() == [5.0, 0.0, 300.0]


def test_replay_rejects_empty(phantom):
    with pytest.raises(ValueError):
        run_replay(phantom, MaterialParams(), SolverConfig(), ProbeSphere(),
                   KinematicsTrajectory(np.zeros(0), np.zeros((0, 3))), FrameSchedule((0.0,)))


def test_solver_failure_marks_divergence(phantom):
    traj, sched = _poke(phantom, 4.0, T=0.4)
    solver = SolverConfig(preconditioner="jacobi", cg_max_iters=2)
    run = run_replay(phantom, MaterialParams(), solver, ProbeSphere(), traj, sched)
    assert run.diverged and run.diverged_at_frame is not None
    assert all(p is None for p in run.positions[run.diverged_at_frame:])


def test_explicit_contact_option(phantom):
    traj, sched = _poke(phantom, 3.0, T=0.5)
    runs = [run_replay(phantom, MaterialParams(), SolverConfig(implicit_contact=flag), ProbeSphere(), traj, sched)
            for flag in (True, False)]
    assert not any(r.diverged for r in runs)
    depth = [min(p[phantom.top_set, 2].min() for p in r.positions) for r in runs]
    # both dent the top surface by up to the commanded depth; the lagged penalty force differs in detail
    top = phantom.vertices[:, 2].max()
    assert all(1.0 < top - d < 3.0 for d in depth)
    assert not np.array_equal(runs[0].positions[-3], runs[1].positions[-3])
