import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srvo import control as ct, policy as pl, scene as sc


@pytest.fixture(scope="module")
def rec():
    return pl.init_params(pl.RECURRENT, 2)


@pytest.fixture(scope="module")
def output(rec):
    setup = sc.sample_episode(4, 2, sc.Domain.SEEN, sc.Pool.TRAIN)
    obs = sc.render_observation(setup.scene, setup.start, setup.camera, setup.slot_perm)
    out, _ = pl.policy_forward(rec, obs, np.zeros(3), setup.query, pl.RecurrentState.zeros())
    return out


def test_cem_config_defaults_and_validation():
    cfg = ct.CemConfig()
    assert (cfg.n_candidates, cfg.top_k) == (150, 5)
    assert ct.ORIGINAL_CEM_SIGMA == 0.003
    for kw in ({"sigma": -1.0}, {"top_k": 0}, {"top_k": 151}):
        with pytest.raises(ValueError):
            ct.CemConfig(**kw)


def test_greedy_executes_unit_step():
    out = pl.PolicyOutput(np.array([2.0, 0.0, 0.0]), np.zeros(64), np.zeros(64))
    a = ct.select_action_greedy(out)
    x = sc.step_dynamics(np.zeros(3), a)
    assert np.allclose(x, [sc.DEFAULT_ENV.v, 0, 0], atol=1e-16)
    assert np.array_equal(ct.select_action_greedy(out), a)


def test_cem_zero_sigma_returns_mean(rec, output):
    cfg = ct.CemConfig(sigma=0.0, top_k=150)
    for seed in range(5):
        a = ct.select_action_cem(rec, output, cfg, seed=seed)
        assert np.array_equal(a, output.action_mean)
        assert np.array_equal(a, ct.select_action_greedy(output))


def test_cem_member_of_candidates(rec, output):
    for seed in range(10):
        a, cands, scores = ct.select_action_cem(rec, output, ct.CemConfig(), seed=seed, return_details=True)
        assert cands.shape == (150, 3) and scores.shape == (150,)
        assert any(np.array_equal(a, c) for c in cands)
        # chosen among the five best
        assert scores[[np.array_equal(a, c) for c in cands].index(True)] >= np.sort(scores)[-5]


def test_cem_uses_q_head(rec, output):
    a, cands, scores = ct.select_action_cem(rec, output, ct.CemConfig(top_k=1), seed=1, return_details=True)
    expected = np.array([pl.q_value(rec, output.trunk_features, pl.normalize_actions(c)) for c in cands])
    assert np.allclose(scores, expected, atol=1e-13)


def test_cem_deterministic(rec, output):
    a = ct.select_action_cem(rec, output, seed=42)
    b = ct.select_action_cem(rec, output, seed=42)
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**62), star=st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_cem_argmax_synthetic_q(seed, star):
    star = np.array(star)
    q = lambda c: -((c - star) ** 2).sum(-1)
    out = pl.PolicyOutput(np.array([0.3, -0.2, 0.9]), np.zeros(64), np.zeros(64))
    a, cands, _ = ct.select_action_cem(None, out, ct.CemConfig(top_k=1), seed=seed, q_fn=q, return_details=True)
    best = max(range(len(cands)), key=lambda i: (-sum((cands[i][j] - star[j]) ** 2 for j in range(3)), -i))
    assert np.array_equal(a, cands[best])


def test_pick_top_k_ties_by_index():
    rng = np.random.default_rng(0)
    scores = np.array([1.0, 3.0, 3.0, 2.0])
    assert ct.pick_top_k(scores, 1, rng) == 1
    picks = {ct.pick_top_k(scores, 2, np.random.default_rng(s)) for s in range(40)}
    assert picks == {1, 2}


# -- trials -------------------------------------------------------------------------


def test_run_trial_expert_success():
    setup = sc.sample_episode(21, 3, sc.Domain.UNSEEN, sc.Pool.HELDOUT)
    d, ok, traj = ct.run_trial(None, setup, ct.Selector.EXPERT)
    assert ok and d <= sc.DEFAULT_ENV.rho and traj.T == 10


def test_run_trial_fixed_seed_repeatable(rec):
    setup = sc.sample_episode(22, 2, sc.Domain.SEEN, sc.Pool.TRAIN)
    r1 = ct.run_trial(rec, setup, ct.Selector.CEM, T=4, seed=5)
    r2 = ct.run_trial(rec, setup, ct.Selector.CEM, T=4, seed=5)
    assert r1[0] == r2[0] and r1[2].T == 4


def test_batched_trials_match_single(rec):
    eps = ct.trial_episodes(0, ct.Condition.NOVEL_VP_SEEN_T, 2, 6)
    batch = ct.run_trials(rec, eps, ct.Selector.CEM, T=5).final_distance()
    for i in range(6):
        single = ct.run_trials(rec, eps.take([i]), ct.Selector.CEM, T=5).final_distance()[0]
        assert abs(single - batch[i]) < 1e-12


def test_condition_pools():
    for cond in ct.Condition:
        eps = ct.trial_episodes(1, cond, 2, 20)
        pool = sc.camera_pool(cond.pool)
        for i in range(20):
            assert any(np.array_equal(eps.cam_rot[i], c.rotation) and np.array_equal(eps.cam_pos[i], c.position) for c in pool)
        centers = sc.descriptor_centers(cond.domain)
        d = eps.descriptors[0, : eps.n_objects[0]]
        assert np.min(np.linalg.norm(d[:, None] - centers[None], axis=-1), axis=1).max() < 1.0


# -- benchmark / report -----------------------------------------------------------


@pytest.fixture(scope="module")
def report(rec):
    return ct.run_benchmark({"recurrent": rec, "reactive": pl.init_params(pl.REACTIVE, 2)}, n_trials=12, seed=3, chunk=5)


def _rows(text):
    return list(csv.reader(line for line in io.StringIO(text) if not line.startswith("#")))


def test_report_structure(report):
    rows = _rows(report.to_csv())
    assert rows[0] == ct.CSV_COLUMNS
    assert len(rows) == 1 + 2 * 6
    for variant in ("recurrent", "reactive"):
        cells = {(r[2], r[3]) for r in rows[1:] if r[0] == variant}
        assert len(cells) == 6
    assert all(int(r[4]) == 12 for r in rows[1:])
    assert "0.0685" in report.to_csv()


def test_report_paired_trials(report, rec):
    # both variants face identical episodes: recompute one row with a single-chunk run
    eps = ct.trial_episodes(3, ct.Condition.SEEN_VP_UNSEEN_T, 3, 12)
    d = ct.run_trials(rec, eps).final_distance()
    # different batch shapes round differently in the last bits
    assert np.max(np.abs(report.row("recurrent", "greedy", 3, "SEEN_VP_UNSEEN_T").distances - d)) < 1e-12


def test_report_stats_recompute(report, tmp_path):
    path = tmp_path / "d.csv"
    report.write_distances(path)
    rows = list(csv.DictReader(open(path)))
    for r in report.rows:
        ds = [float(x["distance"]) for x in rows if (x["variant"], x["n_objects"], x["condition"]) == (r.variant, str(r.n_objects), r.condition)]
        assert np.mean(ds) == r.mean_dist
        assert np.median(ds) == r.median_dist
        assert all(d >= 0 for d in ds)


def test_report_threads_and_chunks_invariant(rec):
    kw = dict(n_trials=7, seed=9, conditions=[ct.Condition.NOVEL_VP_UNSEEN_T], n_objects=(2,), selectors=("greedy", "cem"))
    a = ct.run_benchmark({"r": rec}, threads=1, **kw)
    b = ct.run_benchmark({"r": rec}, threads=3, **kw)
    assert a.to_csv() == b.to_csv()
    c = ct.run_benchmark({"r": rec}, threads=2, chunk=3, **kw)
    for ra, rc in zip(a.rows, c.rows):
        assert np.max(np.abs(ra.distances - rc.distances)) < 1e-12


def test_svgs(report, tmp_path):
    paths = report.write_svgs(str(tmp_path / "h"))
    assert len(paths) == len(report.rows)
    assert open(paths[0]).read().startswith("<svg")
