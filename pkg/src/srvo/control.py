"""Test-time action selection and the condition-matrix benchmark."""
from __future__ import annotations

import csv
import enum
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from srvo import policy as pl
from srvo import scene as sc

ORIGINAL_CEM_SIGMA = 0.003


@dataclass(frozen=True)
class CemConfig:
    sigma: float = 0.05
    n_candidates: int = 150
    top_k: int = 5

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 1 <= self.top_k <= self.n_candidates:
            raise ValueError("need 1 <= top_k <= n_candidates")


class Selector(str, enum.Enum):
    GREEDY = "greedy"
    CEM = "cem"
    RANDOM = "random"
    EXPERT = "expert"


class Condition(str, enum.Enum):
    NOVEL_VP_UNSEEN_T = "NOVEL_VP_UNSEEN_T"
    NOVEL_VP_SEEN_T = "NOVEL_VP_SEEN_T"
    SEEN_VP_UNSEEN_T = "SEEN_VP_UNSEEN_T"

    @property
    def pool(self):
        return sc.Pool.TRAIN if self is Condition.SEEN_VP_UNSEEN_T else sc.Pool.HELDOUT

    @property
    def domain(self):
        return sc.Domain.SEEN if self is Condition.NOVEL_VP_SEEN_T else sc.Domain.UNSEEN


CONDITIONS = tuple(Condition)

# Average final distance (m) from the original simulated benchmark, for context only.
REFERENCE_DISTANCES = {
    ("reactive", 3): (0.1130, 0.1031, 0.1112),
    ("reactive", 2): (0.1062, 0.1067, 0.1051),
    ("reactive+onpolicy", 3): (0.1016, 0.0952, 0.0915),
    ("reactive+onpolicy", 2): (0.0935, 0.0909, 0.0950),
    ("recurrent", 3): (0.0802, 0.0769, 0.0546),
    ("recurrent", 2): (0.0730, 0.0757, 0.0461),
    ("recurrent+onpolicy", 3): (0.0685, 0.0749, 0.0307),
    ("recurrent+onpolicy", 2): (0.0678, 0.0741, 0.0226),
}


# ---------------------------------------------------------------------------
# Selection


def select_action_greedy(output):
    return output.action_mean


def cem_candidates(mean, cfg, rng):
    # sigma is relative to the mean's length, i.e. an angular spread of the executed direction
    scale = cfg.sigma * np.linalg.norm(mean, axis=-1, keepdims=True)
    return mean + scale * rng.normal(size=(cfg.n_candidates, 3))


def pick_top_k(scores, top_k, rng):
    """Index drawn uniformly from the top_k scores; ties keep candidate order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return int(order[rng.integers(top_k)])


def select_action_cem(params, output, cfg=CemConfig(), seed=0, q_fn=None, return_details=False):
    """Perturb the mean action, score candidates with the Q head, sample among the best.

    ``q_fn(candidates) -> scores`` replaces the learned Q head when given.
    """
    rng = seed if isinstance(seed, np.random.Generator) else sc.rng_for(seed, 0xCE)
    cands = cem_candidates(np.asarray(output.action_mean, dtype=np.float64), cfg, rng)
    if q_fn is None:
        scores = pl.q_value(params, output.trunk_features[None, :], pl.normalize_actions(cands))
    else:
        scores = np.asarray(q_fn(cands), dtype=np.float64)
    choice = cands[pick_top_k(scores, cfg.top_k, rng)]
    return (choice, cands, scores) if return_details else choice


def _cem_batch(params, out, cfg, trial_seeds, t):
    b = len(trial_seeds)
    rngs = [sc.rng_for(int(s), 0xCE, t) for s in trial_seeds]
    cands = np.stack([cem_candidates(out.action_mean[i], cfg, rngs[i]) for i in range(b)])
    scores = pl.q_value(params, out.trunk_features[:, None, :], pl.normalize_actions(cands))
    return np.stack([cands[i, pick_top_k(scores[i], cfg.top_k, rngs[i])] for i in range(b)])


def make_selector(selector, params, episodes, trial_seeds, cfg=CemConfig(), env=sc.DEFAULT_ENV):
    selector = Selector(selector)
    if selector is Selector.GREEDY:
        return lambda t, out, arm: select_action_greedy(out)
    if selector is Selector.CEM:
        return lambda t, out, arm: _cem_batch(params, out, cfg, trial_seeds, t)
    if selector is Selector.RANDOM:
        return lambda t, out, arm: np.stack([sc.rng_for(int(s), 0x4A, t).normal(size=3) for s in trial_seeds])
    return lambda t, out, arm: episodes.expert(arm, env.rho)


# ---------------------------------------------------------------------------
# Trials


def run_trials(params, episodes, selector=Selector.GREEDY, T=10, cfg=CemConfig(), env=sc.DEFAULT_ENV, shift=None):
    """Batched trials; randomness is keyed by each episode's seed, so results
    do not depend on how trials are grouped."""
    selector = Selector(selector)
    needs_net = selector in (Selector.GREEDY, Selector.CEM)
    select = make_selector(selector, params, episodes, episodes.seeds, cfg, env)
    return pl.rollout(params if needs_net else None, episodes, T, select, env, shift)


def run_trial(params, setup, selector=Selector.GREEDY, T=10, seed=None, cfg=CemConfig(), env=sc.DEFAULT_ENV, shift=None):
    """One episode; returns (final_distance, success, trajectory)."""
    episodes = sc.EpisodeBatch.from_setups([setup])
    if seed is not None:
        episodes.seeds = np.array([seed], dtype=np.int64)
    traj = run_trials(params, episodes, selector, T, cfg, env, shift)
    return float(traj.final_distance()[0]), bool(traj.rewards[0, -1] == 1.0), traj


def trial_seeds(seed, condition, n_objects, n_trials):
    k = CONDITIONS.index(Condition(condition))
    return sc.rng_for(seed, 0x7E57, k, n_objects).integers(0, 2**62, size=n_trials)


def trial_episodes(seed, condition, n_objects, n_trials, env=sc.DEFAULT_ENV):
    condition = Condition(condition)
    seeds = trial_seeds(seed, condition, n_objects, n_trials)
    return sc.sample_episode_batch(seeds, n_objects, condition.domain, condition.pool, env)


# ---------------------------------------------------------------------------
# Report


@dataclass
class ReportRow:
    variant: str
    selector: str
    n_objects: int
    condition: str
    distances: np.ndarray
    successes: np.ndarray
    seed: int

    @property
    def n_trials(self):
        return len(self.distances)

    @property
    def mean_dist(self):
        return float(np.mean(self.distances))

    @property
    def median_dist(self):
        return float(np.median(self.distances))

    @property
    def success_rate(self):
        return float(np.mean(self.successes))


CSV_COLUMNS = ["variant", "selector", "n_objects", "condition", "n_trials", "mean_dist", "median_dist", "success_rate", "seed"]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def row(self, variant, selector, n_objects, condition):
        for r in self.rows:
            if (r.variant, r.selector, r.n_objects, r.condition) == (variant, Selector(selector).value, n_objects, Condition(condition).value):
                return r
        raise KeyError((variant, selector, n_objects, condition))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# srvo evaluation report\n")
        for key in sorted(self.metadata):
            buf.write(f"# {key}: {json.dumps(self.metadata[key], sort_keys=True)}\n")
        buf.write("# metric: final-step end-effector to target-center distance (workspace units)\n")
        buf.write("# reference (original simulated benchmark, meters; columns NOVEL_VP_UNSEEN_T, NOVEL_VP_SEEN_T, SEEN_VP_UNSEEN_T):\n")
        for (name, n), vals in REFERENCE_DISTANCES.items():
            buf.write(f"#   {name} n_objects={n}: " + ", ".join(f"{v:.4f}" for v in vals) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.variant, r.selector, r.n_objects, r.condition, r.n_trials, f"{r.mean_dist:.10f}", f"{r.median_dist:.10f}", f"{r.success_rate:.6f}", r.seed])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def write_distances(self, path):
        """Per-trial distances, one line per trial (for recomputing summaries)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "selector", "n_objects", "condition", "trial", "distance", "success"])
            for r in self.rows:
                for i, (d, s) in enumerate(zip(r.distances, r.successes)):
                    w.writerow([r.variant, r.selector, r.n_objects, r.condition, i, repr(float(d)), int(s)])

    def write_svgs(self, prefix):
        paths = []
        for r in self.rows:
            path = f"{prefix}_{r.variant}_{r.selector}_{r.n_objects}obj_{r.condition}.svg"
            with open(path, "w") as fh:
                fh.write(histogram_svg(r.distances, f"{r.variant} / {r.selector} / {r.n_objects} objects / {r.condition}"))
            paths.append(path)
        return paths


def histogram_svg(values, title, bins=20, width=420, height=240):
    values = np.asarray(values, dtype=np.float64)
    hi = max(float(values.max()) if values.size else 1.0, 1e-9)
    counts, edges = np.histogram(values, bins=bins, range=(0.0, hi))
    top = max(int(counts.max()) if counts.size else 1, 1)
    pad, plot_w, plot_h = 30, width - 40, height - 60
    bw = plot_w / bins
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="18" font-size="11">{title}</text>',
    ]
    for k, c in enumerate(counts):
        h = plot_h * c / top
        parts.append(f'<rect x="{pad + k * bw:.2f}" y="{30 + plot_h - h:.2f}" width="{bw - 1:.2f}" height="{h:.2f}" fill="#4a7ab5"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="10">0</text>')
    parts.append(f'<text x="{pad + plot_w - 40}" y="{height - 10}" font-size="10">{hi:.3f}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def run_benchmark(
    variants,
    conditions=CONDITIONS,
    n_objects=(2, 3),
    selectors=(Selector.GREEDY,),
    n_trials=300,
    seed=0,
    threads=1,
    cfg=CemConfig(),
    env=sc.DEFAULT_ENV,
    shift=None,
    T=10,
    chunk=50,
    metadata=None,
):
    """Evaluate every (variant, selector) on every (n_objects, condition) cell.

    ``variants`` maps a name to a ParamStore (None means the policy-free
    selectors only). All variants see the same trial seeds per cell. Trials
    are processed in fixed chunks of ``chunk`` episodes; ``threads`` only
    changes how many chunks run at once.
    """
    meta = {
        "seed": int(seed),
        "n_trials": int(n_trials),
        "horizon": int(T),
        "cem": {"sigma": cfg.sigma, "n_candidates": cfg.n_candidates, "top_k": cfg.top_k},
        "shifted_descriptors": shift is not None,
        "final_step_note": "distance taken at the final step only; averaging over trailing steps is not applied",
    }
    meta.update(metadata or {})
    report = EvalReport(metadata=meta)
    jobs = []
    for n in n_objects:
        for cond in conditions:
            cond = Condition(cond)
            episodes = trial_episodes(seed, cond, n, n_trials, env)
            for name, params in variants.items():
                for sel in selectors:
                    jobs.append((name, Selector(sel), n, cond, params, episodes))

    def work(task):
        params, sel, episodes, lo = task
        traj = run_trials(params, episodes.take(np.arange(lo, min(lo + chunk, len(episodes)))), sel, T, cfg, env, shift)
        return traj.final_distance(), traj.rewards[:, -1]

    tasks = [(params, sel, episodes, lo) for (_, sel, _, _, params, episodes) in jobs for lo in range(0, len(episodes), chunk)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    k = 0
    for name, sel, n, cond, params, episodes in jobs:
        m = -(-len(episodes) // chunk)
        d = np.concatenate([r[0] for r in results[k : k + m]])
        s = np.concatenate([r[1] for r in results[k : k + m]])
        k += m
        report.rows.append(ReportRow(name, sel.value, n, cond.value, d, s, int(seed)))
    return report
