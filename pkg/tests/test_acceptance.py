"""End-to-end acceptance checks.

Runs the default schedule through the command-line layer (gen, train both
variants, two DAgger iterations each, adapt, eval) once per session, then
checks each criterion and prints one PASS/FAIL line per criterion. The
schedule takes several minutes on one CPU core.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from srvo import cli, control as ct, nn, policy as pl, scene as sc, training as tr

RESULTS = {}


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[number] = line
    print("\n" + line)
    return ok


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def mean_of(table, variant, selector="greedy", condition=None, n_objects=None):
    picked = [r for r in table if r["variant"] == variant and r["selector"] == selector]
    if condition:
        picked = [r for r in picked if r["condition"] == condition]
    if n_objects:
        picked = [r for r in picked if int(r["n_objects"]) == n_objects]
    assert picked, (variant, selector, condition, n_objects)
    w = np.array([int(r["n_trials"]) for r in picked], dtype=float)
    return float(np.dot(w, [float(r["mean_dist"]) for r in picked]) / w.sum())


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    # SRVO_ACCEPTANCE_DIR keeps the trained artifacts between sessions
    keep = os.environ.get("SRVO_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps({"paths": {"dataset": str(root / "demos.srvd"), "checkpoints": str(root / "ck"), "reports": str(root / "rep")}}))
    base = ["--config", str(cfg_path), "--quiet"]
    done = root / "pipeline.json"
    if not done.exists():
        t0 = time.process_time()
        assert cli.main(base + ["gen"]) == 0
        for variant in (pl.RECURRENT, pl.REACTIVE):
            assert cli.main(base + ["train", "--variant", variant]) == 0
            assert cli.main(base + ["dagger", str(root / "ck" / f"{variant}_base.ckpt")]) == 0
        assert cli.main(base + ["adapt", str(root / "ck" / "recurrent_dagger.ckpt")]) == 0
        done.write_text(json.dumps({"train_cpu": time.process_time() - t0}))
    train_cpu = json.loads(done.read_text())["train_cpu"]
    return {"root": root, "base": base, "ck": root / "ck", "train_cpu": train_cpu}


# ---------------------------------------------------------------------------


def _grad_case(widths, seed):
    params = pl.init_params(pl.RECURRENT, seed, widths)
    eps = sc.sample_episode_batch(np.array([11]), np.array([3]), sc.Domain.SEEN, sc.Pool.TRAIN)
    traj = pl.rollout(params, eps, 3, pl.source_selector(pl.ActionSource.EXPERT_NOISY, eps, 3, 0.3))
    traj.qtargets = tr.mc_q_targets(params, traj, 0.9, 2, seed=1)

    def fn(p):
        parts, grads = tr.combined_loss(p, traj)
        return parts.total, grads

    loss = lambda p: tr.combined_loss_value(p, traj)
    return params, fn, loss, nn.fd_noise_floor(loss(params), 1e-5)


def test_criterion_1_gradient_exactness():
    t0 = time.process_time()
    # every coordinate of a model inside the 3e4 budget
    small = pl.Widths(32, 32, 32, 32, 32)
    params, fn, loss, floor = _grad_case(small, 0)
    err_small, det_small = nn.grad_check(fn, params, max_coords=params.size, loss_fn=loss, floor=floor, return_details=True)
    # the default widths are larger; sample 200 coordinates from each tensor
    params, fn, loss, floor = _grad_case(pl.DEFAULT_WIDTHS, 0)
    err_full, det_full = nn.grad_check(fn, params, per_tensor=200, loss_fn=loss, floor=floor, return_details=True)
    cpu = time.process_time() - t0
    err = max(err_small, err_full)
    ok = err < 1e-4 and cpu < 120 and len(det_small) == pl.count_params(pl.RECURRENT, small)
    report(
        1,
        ok,
        f"max rel err {err_small:.2e} over all {len(det_small)} params (32-wide), "
        f"{err_full:.2e} over {len(det_full)} sampled of {params.size} (default); "
        f"floor {floor:.1e}; {cpu:.1f}s CPU",
    )
    assert ok


def test_criterion_2_mc_oracle():
    from test_training import brute_force_q

    params = pl.init_params(pl.RECURRENT, 4)
    counts = sc.rng_for(9).choice([1, 2, 3], size=50)
    eps = sc.sample_episode_batch(np.arange(1000, 1050), counts, sc.Domain.SEEN, sc.Pool.TRAIN)
    traj = pl.rollout(params, eps, 10, pl.source_selector(pl.ActionSource.EXPERT_NOISY, eps, 10, 0.3))
    worst = 0.0
    for gamma in (0.0, 0.5, 0.9):
        q = tr.mc_q_targets(params, traj, gamma=gamma, M=1, sigma=0.0)
        for i in range(len(traj)):
            worst = max(worst, float(np.max(np.abs(q[i] - brute_force_q(params, traj, i, gamma)))))
    nonzero = int(np.count_nonzero(traj.rewards))
    ok = worst <= 1e-12
    report(2, ok, f"max |mc - brute force| = {worst:.1e} over 50 trajectories x 3 discounts ({nonzero} rewarded steps)")
    assert ok


def test_criterion_3_cem_argmax():
    hits = 0
    out = pl.PolicyOutput(np.array([0.2, -0.7, 0.4]), np.zeros(64), np.zeros(64))
    for seed in range(100):
        star = sc.rng_for(seed, 77).normal(size=3)
        q = lambda c: -((c - star) ** 2).sum(-1)
        a, cands, _ = ct.select_action_cem(None, out, ct.CemConfig(top_k=1), seed=seed, q_fn=q, return_details=True)
        best, best_val = None, -np.inf
        for k, c in enumerate(cands):
            v = -sum((c[j] - star[j]) ** 2 for j in range(3))
            if v > best_val:
                best, best_val = k, v
        hits += int(np.array_equal(a, cands[best]))
    ok = hits == 100
    report(3, ok, f"{hits}/100 seeded runs select the brute-force argmax")
    assert ok


def test_criterion_4_recurrent_vs_reactive(run):
    out = run["root"] / "rep" / "c4.csv"
    args = run["base"] + ["eval", f"recurrent={run['ck'] / 'recurrent_dagger.ckpt'}", f"reactive={run['ck'] / 'reactive_dagger.ckpt'}", "--random-baseline", "--out", str(out)]
    assert cli.main(args) == 0
    table = rows(out)
    cond = "NOVEL_VP_UNSEEN_T"
    rec = mean_of(table, "recurrent", condition=cond, n_objects=2)
    ff = mean_of(table, "reactive", condition=cond, n_objects=2)
    rnd = mean_of(table, "random", selector="random", condition=cond, n_objects=2)
    ok = rec <= 0.75 * ff and rnd >= 2 * rec and rnd >= 2 * ff and run["train_cpu"] <= 1800
    report(4, ok, f"recurrent {rec:.4f}, reactive {ff:.4f} (ratio {rec / ff:.3f}), random {rnd:.4f}; schedule {run['train_cpu']:.0f}s CPU")
    assert ok


def test_criterion_5_dagger(run):
    out = run["root"] / "rep" / "c5.csv"
    args = run["base"] + ["eval", f"pre={run['ck'] / 'recurrent_base.ckpt'}", f"post={run['ck'] / 'recurrent_dagger_iter1.ckpt'}", "--out", str(out)]
    assert cli.main(args) == 0
    table = rows(out)
    pre = mean_of(table, "pre", condition="SEEN_VP_UNSEEN_T")
    post = mean_of(table, "post", condition="SEEN_VP_UNSEEN_T")
    gain = 1 - post / pre
    ok = gain >= 0.10
    report(5, ok, f"SEEN_VP_UNSEEN_T mean distance {pre:.4f} -> {post:.4f} after one iteration ({100 * gain:.1f}% better)")
    assert ok


def test_criterion_6_value_head(run):
    out = run["root"] / "rep" / "c6.csv"
    args = run["base"] + ["eval", f"recurrent={run['ck'] / 'recurrent_dagger.ckpt'}", "--selector", "greedy", "--selector", "cem", "--out", str(out)]
    assert cli.main(args) == 0
    table = rows(out)
    changes = []
    for cond in ct.CONDITIONS:
        for n in (2, 3):
            g = mean_of(table, "recurrent", "greedy", cond.value, n)
            c = mean_of(table, "recurrent", "cem", cond.value, n)
            changes.append((cond.value, n, c / g - 1))
    worst = max(d for _, _, d in changes)
    best = min(d for _, _, d in changes)
    ok = worst <= 0.05 and best < 0
    detail = ", ".join(f"{c}/{n}: {100 * d:+.1f}%" for c, n, d in changes)
    report(6, ok, f"CEM vs greedy change per cell: {detail}")
    assert ok


def test_criterion_7_adaptation(run):
    before, _, _ = nn.load_checkpoint(run["ck"] / "recurrent_dagger.ckpt")
    after, _, _ = nn.load_checkpoint(run["ck"] / "recurrent_dagger_adapted.ckpt")
    frozen = [n for n in before.names() if not n.startswith(pl.ENCODER_PREFIXES)]
    identical = all(before[n].tobytes() == after[n].tobytes() for n in frozen)
    out = run["root"] / "rep" / "c7.csv"
    args = run["base"] + ["eval", f"unadapted={run['ck'] / 'recurrent_dagger.ckpt'}", f"adapted={run['ck'] / 'recurrent_dagger_adapted.ckpt'}", "--shifted", "--out", str(out)]
    assert cli.main(args) == 0
    table = rows(out)
    u = mean_of(table, "unadapted", condition="NOVEL_VP_UNSEEN_T")
    a = mean_of(table, "adapted", condition="NOVEL_VP_UNSEEN_T")
    gain = 1 - a / u
    ok = identical and gain >= 0.15
    report(7, ok, f"{len(frozen)} non-encoder tensors identical: {identical}; shifted NOVEL_VP_UNSEEN_T {u:.4f} -> {a:.4f} ({100 * gain:.1f}% better)")
    assert ok


def test_criterion_8_expert():
    env = sc.DEFAULT_ENV
    T = math.ceil(env.diameter / env.v) + 1
    eps = sc.sample_episode_batch(np.arange(300) + 5000, sc.rng_for(8).choice([1, 2, 3], size=300), sc.Domain.UNSEEN, sc.Pool.HELDOUT)
    traj = ct.run_trials(None, eps, ct.Selector.EXPERT, T=T)
    rate = float(np.mean(traj.rewards[:, -1] == 1.0))
    ok = rate == 1.0
    report(8, ok, f"expert success {rate:.3f} over 300 scenes within {T} steps")
    assert ok


def test_criterion_9_determinism(run):
    outs = []
    for k, threads in enumerate(("1", "1", "4")):
        out = run["root"] / "rep" / f"c9_{k}.csv"
        args = run["base"] + ["eval", f"recurrent={run['ck'] / 'recurrent_dagger.ckpt'}", "--selector", "cem", "--threads", threads, "--trials", "60", "--out", str(out)]
        assert cli.main(args) == 0
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1] == outs[2]
    report(9, ok, "eval CSV byte-identical across reruns and --threads 1/4" if ok else "eval CSV bytes differ")
    assert ok


def test_zz_summary():
    print()
    for k in sorted(RESULTS):
        print(RESULTS[k])
