import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from softcorrect import search as S
from softcorrect.errors import SearchError
from softcorrect.fem import MaterialParams, ProbeSphere, SolverConfig, run_replay
from softcorrect.replay import FrameSchedule, KinematicsTrajectory

# Tables 1 and 2 of the reference experiment (physical phantom)
PAPER_COARSE = [(1e1, 8.4981), (1e2, 6.0760), (1e3, 5.5417), (1e4, 5.2632), (1e5, 5.1847), (1e6, 9.3356)]
PAPER_FINE = [(2.5e3, 5.2724), (5e3, 4.9041), (7.5e3, 5.5025), (2.5e4, 5.2202), (5e4, None), (7.5e4, 5.4565)]


def _entries(pairs, stage="coarse"):
    return [S.SearchEntry(E, d, 0 if d is None else 10, 3 if d is None else None, stage) for E, d in pairs]


def _cells(line):
    return [c.strip() for c in line.split("|")]


@pytest.mark.parametrize("value,label", [(1e1, "1e1"), (2500.0, "2.5e3"), (5e3, "5e3"), (7.5e4, "7.5e4"),
                                         (1e6, "1e6"), (0.5, "5e-1")])
def test_e_label(value, label):
    assert S.e_label(value) == label


@given(st.sampled_from([1.0, 2.5, 5.0, 7.5]), st.integers(-2, 8))
def test_e_label_parses_back(m, e):
    v = m * 10.0**e
    assert float(S.e_label(v)) == pytest.approx(v, rel=1e-12)


def test_fine_values_reference_grid():
    assert S.fine_values(1e4, (2.5, 5.0, 7.5)) == [2.5e3, 5e3, 7.5e3, 2.5e4, 5e4, 7.5e4]


@given(st.integers(0, 7))
def test_fine_values_bracket_best(j):
    best = 10.0**j
    vals = S.fine_values(best, (2.5, 5.0, 7.5))
    assert len(vals) == 6 and all(np.diff(vals) > 0)
    assert best / 10 < vals[0] and vals[-1] < best * 10


def test_search_spec_rejects():
    with pytest.raises(SearchError):
        S.SearchSpec(coarse_values=(1e3, 1e2))
    with pytest.raises(SearchError):
        S.SearchSpec(coarse_values=())
    with pytest.raises(SearchError):
        S.SearchSpec(fine_multipliers=(0.5, 5.0))


def test_format_table_reproduces_paper_layout():
    text = S.format_table(_entries(PAPER_COARSE))
    head, rule, vals = text.splitlines()
    assert _cells(head) == ["1e1", "1e2", "1e3", "1e4", "1e5", "1e6"]
    assert _cells(vals) == ["8.4981", "6.0760", "5.5417", "5.2632", "5.1847", "9.3356"]
    assert set(rule) <= {"-", "+"}
    assert len(head) == len(rule) == len(vals)
    fine = S.format_table(_entries(PAPER_FINE, "fine")).splitlines()
    assert _cells(fine[0]) == ["2.5e3", "5e3", "7.5e3", "2.5e4", "5e4", "7.5e4"]
    assert _cells(fine[2]) == ["5.2724", "4.9041", "5.5025", "5.2202", "N/A", "5.4565"]


def test_landscape_warnings_on_reference_fine_table():
    msgs = S.landscape_warnings(_entries(PAPER_FINE, "fine"))
    assert any("5e4" in m and "N/A" in m for m in msgs)
    assert any("non-convex" in m for m in msgs)
    assert S.landscape_warnings(_entries([(1e3, 3.0), (2e3, 2.0), (3e3, 2.5)])) == []
    single = S.landscape_warnings(_entries([(1e3, None), (2e3, 2.0)]))
    assert any("only one finite" in m for m in single)


def test_report_roundtrip(tmp_path):
    res = S.SearchResult(_entries(PAPER_COARSE), _entries(PAPER_FINE, "fine"), 5e3, ["x"])
    csv, txt = S.write_report(res, tmp_path)
    rows = S.read_report(csv)
    assert [r.modulus for r in rows] == [e for e, _ in PAPER_COARSE + PAPER_FINE]
    assert [r.mean_distance for r in rows] == [d for _, d in PAPER_COARSE + PAPER_FINE]
    assert rows[10].diverged_at_frame == 3 and rows[10].frames_used == 0
    assert [r.stage for r in rows] == ["coarse"] * 6 + ["fine"] * 6
    assert csv.read_text().splitlines()[11] == "50000,NA,0,3,fine"
    report = txt.read_text()
    assert "selected E = 5e3 Pa" in report and "N/A" in report and "warning: x" in report
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(SearchError):
        S.read_report(tmp_path / "bad.csv")


# a miniature scene whose observations come from a replay at E = 5e3 ------------------------------

TRUE_E = 5e3


@pytest.fixture(scope="module")
def scene(small_mesh):
    T, rate = 0.5, 300
    t = np.arange(int(T * rate) + 1) / rate
    top = small_mesh.vertices[small_mesh.vertex_id(1, 1, 2)]
    s = 0.5 - 0.5 * np.cos(2 * np.pi * t / T)
    traj = KinematicsTrajectory(t, top + [0, 0, 10.5] + np.outer(s * 8.0, [0, 0, -1]))
    sched = FrameSchedule(tuple(np.arange(0, T + 1e-9, 1 / 30)))
    truth = run_replay(small_mesh, MaterialParams(TRUE_E), SolverConfig(), ProbeSphere(), traj, sched)
    top_sampler = small_mesh.sampler(3, "top")
    clouds = [top_sampler.sample(p) for p in truth.positions]
    return S.SearchScene(small_mesh, MaterialParams(), SolverConfig(), ProbeSphere(), traj, sched, clouds)


def test_search_recovers_true_modulus(scene, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", S.NonConvexWarning)
        res = S.run_search(S.SearchSpec(), scene, cache_dir=tmp_path)
    assert [e.modulus for e in res.coarse] == [1e1, 1e2, 1e3, 1e4, 1e5, 1e6]
    assert len(res.fine) == 6 and all(e.stage == "fine" for e in res.fine)
    assert res.selected == TRUE_E
    assert next(e for e in res.fine if e.modulus == TRUE_E).mean_distance < 1e-12
    # every run landed in the cache; a second search only reads it back
    assert len(list(tmp_path.iterdir())) == 12
    again = S.run_search(S.SearchSpec(), scene, cache_dir=tmp_path)
    assert [(e.modulus, e.mean_distance) for e in again.coarse + again.fine] == \
        [(e.modulus, e.mean_distance) for e in res.coarse + res.fine]


def test_cached_run_matches_fresh(scene, tmp_path):
    fresh = S.simulate_cached(scene, 1e4)
    S.simulate_cached(scene, 1e4, tmp_path)
    cached = S.simulate_cached(scene, 1e4, tmp_path)
    for p, q in zip(fresh.positions, cached.positions):
        assert np.array_equal(p, q)
    a = S.score_run(scene.mesh, fresh, scene.clouds, 1e4)
    b = S.score_run(scene.mesh, cached, scene.clouds, 1e4)
    assert a.mean_distance == b.mean_distance and a.frames_used == len(scene.clouds)


def test_run_key_tracks_inputs(scene):
    k = S.run_key(scene, MaterialParams(1e3))
    assert k == S.run_key(scene, MaterialParams(1e3))
    assert k != S.run_key(scene, MaterialParams(2e3))
    other = S.SearchScene(scene.mesh, scene.material, SolverConfig(dt=1 / 600), scene.probe,
                          scene.trajectory, scene.schedule, scene.clouds)
    assert k != S.run_key(other, MaterialParams(1e3))


def test_diverged_runs_are_na(scene):
    # a budget-starved Jacobi solver cannot converge once the stiff runs make contact
    starved = SolverConfig(preconditioner="jacobi", cg_max_iters=3)
    sc = S.SearchScene(scene.mesh, scene.material, starved, scene.probe, scene.trajectory, scene.schedule,
                       scene.clouds)
    table = S.evaluate_moduli(sc, [1e2, 1e6])
    assert all(not e.finite for e in table if e.modulus == 1e6)
    na = [e for e in table if not e.finite]
    assert na and all(e.mean_distance is None and e.diverged_at_frame is not None for e in na)
    assert "N/A" in S.format_table(table)


def test_all_diverged_raises(scene):
    doomed = SolverConfig(gravity=(0.0, 0.0, -9810.0), divergence_threshold=1e-6)
    sc = S.SearchScene(scene.mesh, scene.material, doomed, scene.probe, scene.trajectory, scene.schedule,
                       scene.clouds)
    with pytest.raises(SearchError, match="diverged"):
        S.coarse_search(S.SearchSpec(coarse_values=(1e2, 1e4)), sc)


def test_score_requires_frames(scene):
    run = S.simulate_cached(scene, 1e3)
    with pytest.raises(SearchError):
        S.score_run(scene.mesh, run, [None] * len(run.positions), 1e3)
