"""Demonstrations, losses, Monte-Carlo Q targets, DAgger and encoder adaptation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from srvo import kernels
from srvo import policy as pl
from srvo import scene as sc
from srvo.nn import AdamState, NumericError, Tape, adam_step, save_checkpoint, softmax

log = logging.getLogger(__name__)

DATASET_MAGIC = b"SRVD"
DATASET_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.9
    mc_unrolls: int = 5
    demo_noise: float = 0.1
    explore_noise: float = 0.1
    random_prefix: int = 2
    w_supervised: float = 1.0
    w_value: float = 0.5
    w_localization: float = 0.5
    batch_size: int = 32
    steps: int = 16000
    dagger_steps: int = 3000
    dagger_episodes: int = 2000
    buffer_capacity: int = 50_000
    lr: float = 3e-3
    lr_decay: float = 0.98
    lr_decay_steps: int = 1000
    checkpoint_every: int = 1000
    horizon: int = 10
    q_candidates: int = 8
    q_candidate_noise: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.q_candidates < 0 or self.q_candidate_noise < 0:
            raise ValueError("q_candidates and q_candidate_noise must be >= 0")
        if self.mc_unrolls < 1:
            raise ValueError("mc_unrolls must be >= 1")
        if min(self.w_supervised, self.w_value, self.w_localization) < 0:
            raise ValueError("loss weights must be non-negative")

    def new_optimizer(self):
        return AdamState(lr=self.lr, decay=self.lr_decay, decay_steps=self.lr_decay_steps)


def episode_seeds(seed, n, tag):
    return sc.rng_for(seed, tag).integers(0, 2**62, size=n)


# ---------------------------------------------------------------------------
# Data


def generate_demonstrations(
    n_episodes,
    sigma=0.1,
    seed=0,
    env=sc.DEFAULT_ENV,
    T=10,
    random_prefix=2,
    domain=sc.Domain.SEEN,
    pool=sc.Pool.TRAIN,
    n_objects=(1, 2, 3),
):
    """Noisy expert episodes.

    The first k ~ U{0..random_prefix} steps execute random directions (the
    past actions the model must recover from); afterwards the executed action
    is normalize(expert + N(0, sigma^2)). Labels are always the clean expert
    action at the visited state.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    seeds = episode_seeds(seed, n_episodes, 0xDE70)
    rng = sc.rng_for(seed, 0xDE71)
    counts = rng.choice(np.asarray(n_objects), size=n_episodes)
    episodes = sc.sample_episode_batch(seeds, counts, domain, pool, env)
    noise = pl.episode_noise(seeds, T, 0xDE72) * sigma
    random_dirs = pl.normalize_actions(pl.episode_noise(seeds, T, 0xDE73))
    prefix = np.array([sc.rng_for(int(s), 0xDE74).integers(0, random_prefix + 1) for s in seeds]) if random_prefix > 0 else np.zeros(n_episodes, int)

    def select(t, out, arm):
        a = episodes.expert(arm, env.rho) + noise[:, t]
        return np.where((t < prefix)[:, None], random_dirs[:, t], a)

    traj = pl.rollout(None, episodes, T, select, env)
    traj.source = "EXPERT_NOISY"
    return traj


class EpisodeBuffer:
    """FIFO store of trajectories with a fixed episode capacity."""

    def __init__(self, capacity=50_000):
        self.capacity = int(capacity)
        self.data = None
        self.inserted = 0

    def __len__(self):
        return 0 if self.data is None else len(self.data)

    def add(self, traj):
        self.data = traj if self.data is None else pl.Trajectories.concat([self.data, traj])
        self.inserted += len(traj)
        if len(self.data) > self.capacity:
            self.data = self.data.take(np.arange(len(self.data) - self.capacity, len(self.data)))
        return self


def dataset_digest(traj):
    h = hashlib.sha256()
    for arr in (traj.episodes.seeds, traj.obs, traj.actions, traj.labels, traj.rewards, traj.arm):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _episode_record(traj, i):
    e = traj.episodes
    q = traj.qtargets[i] if traj.qtargets is not None else np.full(traj.T, np.nan)
    return np.concatenate(
        [
            [e.n_objects[i], e.target_index[i], e.focal],
            e.slot_perm[i],
            e.positions[i].ravel(),
            e.descriptors[i].ravel(),
            e.cam_rot[i].ravel(),
            e.cam_pos[i],
            e.query[i],
            e.start[i],
            traj.obs[i].ravel(),
            traj.actions[i].ravel(),
            traj.labels[i].ravel(),
            traj.rewards[i],
            traj.arm[i].ravel(),
            q,
        ]
    ).astype("<f8")


def save_dataset(path, traj, config=None):
    """Header (magic, version, T, n_episodes, k, config JSON, seeds) + packed float64 records."""
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", DATASET_VERSION, traj.T, len(traj), sc.DESC_DIM))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(traj.episodes.seeds, dtype="<u8").tobytes())
        for i in range(len(traj)):
            fh.write(_episode_record(traj, i).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, T, n, k = struct.unpack("<IIII", fh.read(16))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        if k != sc.DESC_DIM:
            raise ValueError(f"{path}: descriptor size {k} != {sc.DESC_DIM}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(clen).decode("utf-8"))
        seeds = np.frombuffer(fh.read(8 * n), dtype="<u8").astype(np.int64)
        m = sc.MAX_OBJECTS
        sizes = [3, m, m * 3, m * k, 9, 3, k, 3, T * sc.OBS_DIM, T * 3, T * 3, T, (T + 1) * 3, T]
        width = sum(sizes)
        raw = np.frombuffer(fh.read(8 * width * n), dtype="<f8")
        if raw.size != width * n:
            raise ValueError(f"{path}: truncated dataset")
    rec = raw.reshape(n, width)
    parts = np.split(rec, np.cumsum(sizes)[:-1], axis=1)
    head, perm, pos, desc, rot, cpos, query, start, obs, act, lab, rew, arm, q = parts
    episodes = sc.EpisodeBatch(
        seeds=seeds,
        positions=pos.reshape(n, m, 3),
        descriptors=desc.reshape(n, m, k),
        n_objects=head[:, 0].astype(np.int64),
        target_index=head[:, 1].astype(np.int64),
        slot_perm=perm.astype(np.int64),
        cam_rot=rot.reshape(n, 3, 3),
        cam_pos=cpos.copy(),
        query=query.copy(),
        start=start.copy(),
        focal=float(head[0, 2]) if n else 1.0,
    )
    traj = pl.Trajectories(
        episodes,
        obs.reshape(n, T, sc.OBS_DIM),
        act.reshape(n, T, 3),
        lab.reshape(n, T, 3),
        rew.copy(),
        arm.reshape(n, T + 1, 3),
        None,
        q.copy(),
        config.get("source", ""),
    )
    return traj, config


# ---------------------------------------------------------------------------
# Localization labels


def grid_cell(uv, grid=pl.GRID):
    """Cell index row*grid + col of image point(s) uv in [-1, 1]^2, clamped; also returns an outside flag."""
    uv = np.asarray(uv, dtype=np.float64)
    return pl.grid_cells(uv, grid), np.any(np.abs(uv) > 1.0, axis=-1)


def grid_cell_label(camera, scene):
    """(cell index, clamped flag) of the target object's projection."""
    cell, outside = grid_cell(sc.project(camera, scene.target))
    if outside:
        log.warning("target projects outside the image window; clamped to cell %d", int(cell))
    return int(cell), bool(outside)


def episode_grid_labels(episodes):
    uv = episodes.project(episodes.targets[:, None, :])[:, 0]
    return grid_cell(uv)[0]


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossParts:
    total: float
    supervised: float
    value: float
    localization: float


def loss_graph(tp, params, traj, weights=(1.0, 0.5, 0.5), shift=None):
    """Builds total = w_s * supervised + w_v * value + w_l * localization on ``tp``.

    Each term is summed over the T steps of an episode and averaged over episodes.
    """
    n = len(traj)
    query = traj.episodes.query_for(shift)
    obs = traj.obs
    if shift is not None:
        obs = shift_observations(obs, shift)
    g = pl.sequence_graph(tp, params, obs, traj.prev_actions(), query)
    w_s, w_v, w_l = weights
    terms = []
    sup = tp.sq_error(g["action"], traj.labels)
    terms.append((w_s / n, sup))
    val = None
    if traj.qtargets is not None and w_v > 0:
        mask = np.isfinite(traj.qtargets)
        if mask.any():
            q = pl.q_graph(tp, g["P"], g["trunk"], tp.const(traj.actions))
            target = np.where(mask, traj.qtargets, 0.0)[..., None]
            val = tp.sq_error(q, target, mask.astype(np.float64))
            terms.append((w_v / n, val))
    if traj.qcands is not None and w_v > 0:
        mask = np.isfinite(traj.qcand_targets)
        if mask.any():
            k = traj.qcands.shape[2]
            trunk_k = tp.stack([g["trunk"]] * k, axis=2)
            qk = pl.q_graph(tp, g["P"], trunk_k, tp.const(traj.qcands))
            target = np.where(mask, traj.qcand_targets, 0.0)[..., None]
            val_k = tp.sq_error(qk, target, mask.astype(np.float64))
            terms.append((w_v / n, val_k))
            val = val_k if val is None else tp.weighted_sum([(1.0, val), (1.0, val_k)])
    labels = np.repeat(episode_grid_labels(traj.episodes)[:, None], traj.T, axis=1)
    loc = tp.softmax_xent(g["logits"], labels)
    terms.append((w_l / n, loc))
    total = tp.weighted_sum(terms)
    parts = LossParts(
        float(total.value),
        float(sup.value) / n,
        0.0 if val is None else float(val.value) / n,
        float(loc.value) / n,
    )
    return total, parts, g


def combined_loss(params, traj, weights=(1.0, 0.5, 0.5), names=None):
    """(LossParts, grads) of the weighted three-head loss."""
    tp = Tape()
    total, parts, _ = loss_graph(tp, params, traj, weights)
    grads = tp.backward(total, names=names or params.names())
    return parts, grads


def combined_loss_value(params, traj, weights=(1.0, 0.5, 0.5)):
    """Forward pass only; used by finite-difference checks."""
    tp = Tape()
    return loss_graph(tp, params, traj, weights)[1].total


def supervised_loss(params, traj):
    """Sum over steps of ||expert_label - action_mean||^2 (mean over episodes); returns (loss, grads)."""
    tp = Tape()
    g = pl.sequence_graph(tp, params, traj.obs, traj.prev_actions(), traj.episodes.query)
    loss = tp.sq_error(g["action"], traj.labels)
    total = tp.weighted_sum([(1.0 / len(traj), loss)])
    return float(total.value), tp.backward(total, names=params.names())


def value_loss(params, qtargets, traj):
    """Sum over steps of (Q(trunk_t, a_t) - target_t)^2 (mean over episodes); NaN targets are skipped."""
    qtargets = np.asarray(qtargets, dtype=np.float64).reshape(len(traj), traj.T)
    mask = np.isfinite(qtargets)
    tp = Tape()
    g = pl.sequence_graph(tp, params, traj.obs, traj.prev_actions(), traj.episodes.query)
    q = pl.q_graph(tp, g["P"], g["trunk"], tp.const(traj.actions))
    loss = tp.sq_error(q, np.where(mask, qtargets, 0.0)[..., None], mask.astype(np.float64))
    total = tp.weighted_sum([(1.0 / len(traj), loss)])
    return float(total.value), tp.backward(total, names=params.names())


def localization_loss(params, obs, query, labels):
    """Mean cross-entropy of the 8x8 localization logits for single observations."""
    tp = Tape()
    P = tp.params(params)
    logits = pl.localization_graph(tp, P, obs, query)
    ce = tp.softmax_xent(logits, labels)
    total = tp.weighted_sum([(1.0 / len(obs), ce)])
    return float(total.value), tp.backward(total, names=params.names())


def localization_logits(params, obs, query):
    tp = Tape(record=False)
    P = tp.params(params)
    return pl.localization_graph(tp, P, obs, query).value


def localization_accuracy(params, obs, query, labels):
    return float(np.mean(localization_logits(params, obs, query).argmax(axis=1) == labels))


def shift_observations(obs, shift):
    """Apply a descriptor shift to the present slots of flat observations."""
    obs = np.array(obs, dtype=np.float64)
    lead = obs.shape[:-1]
    slots = obs[..., 2:].reshape(*lead, sc.MAX_OBJECTS, 2 + sc.DESC_DIM + 1)
    present = slots[..., -1:]
    slots[..., 2 : 2 + sc.DESC_DIM] = shift.apply(slots[..., 2 : 2 + sc.DESC_DIM]) * present
    obs[..., 2:] = slots.reshape(*lead, -1)
    return obs


# ---------------------------------------------------------------------------
# Monte-Carlo Q targets


@dataclass(frozen=True)
class QTarget:
    step: int
    action: np.ndarray
    value: float


def teacher_forced_states(params, traj):
    """Recurrent states after each step of the recorded episode: h, c of shape (B, T, u)."""
    b, T = len(traj), traj.T
    u = params["core/lstm/U"].shape[1]
    hs = np.zeros((b, T, u))
    cs = np.zeros((b, T, u))
    state = pl.RecurrentState.zeros(b, u)
    prev = traj.prev_actions()
    for t in range(T):
        _, state = pl.policy_forward(params, traj.obs[:, t], prev[:, t], traj.episodes.query, state)
        hs[:, t] = state.h
        cs[:, t] = state.c
    return hs, cs


def mc_q_targets(params, traj, gamma=0.9, M=5, seed=0, sigma=0.1, env=sc.DEFAULT_ENV, chunk=2048, actions=None):
    """Q(s_t, a_t) = r_t + mean over M rollouts of sum_{t'>t} gamma^(t'-t) r_t'.

    Rollouts restart the environment at the recorded post-action position,
    continue the policy (mean + N(0, sigma^2) exploration) from the
    teacher-forced recurrent state and run to the episode horizon T.
    ``actions`` (B, T, 3) unit vectors replace the executed a_t: each is
    stepped from the recorded pre-action position instead. Returns (B, T).
    """
    b, T = len(traj), traj.T
    if actions is None:
        first, arm_next, r_now = traj.actions, traj.arm[:, 1:], traj.rewards
    else:
        first = np.asarray(actions, dtype=np.float64)
        arm_next = np.stack([sc.step_batch(traj.arm[:, t], first[:, t], env) for t in range(T)], axis=1)
        r_now = np.stack([traj.episodes.reward(arm_next[:, t], env.rho) for t in range(T)], axis=1)
    recurrent = pl.variant_of(params) == pl.RECURRENT
    if recurrent:
        hs, cs = teacher_forced_states(params, traj)
    targets = np.zeros((b, T))
    targets[:, T - 1] = r_now[:, T - 1]
    reps = np.repeat(np.arange(b), M)
    for t in range(T - 1):
        L = T - 1 - t
        future = np.zeros((b * M, L))
        for lo in range(0, b * M, chunk):
            sel = reps[lo : lo + chunk]
            eps = traj.episodes.take(sel)
            rep_id = np.arange(lo, lo + len(sel)) % M
            noise_seeds = [int(s) * 1_000_003 + t * 131 + int(r) for s, r in zip(traj.episodes.seeds[sel], rep_id)]
            select = pl.source_selector(pl.ActionSource.POLICY, eps, L, sigma, seeds=[seed * 7919 + k for k in noise_seeds], seed_tag=0x4D43)
            state0 = pl.RecurrentState(hs[sel, t], cs[sel, t]) if recurrent else None
            cont = pl.rollout(params, eps, L, select, env, arm0=arm_next[sel, t], state0=state0, prev0=first[sel, t])
            future[lo : lo + len(sel)] = cont.rewards
        padded = np.concatenate([np.zeros((b * M, 1)), future], axis=1)
        returns = kernels.discounted_sum(np.ascontiguousarray(padded), float(gamma))
        targets[:, t] = r_now[:, t] + returns.reshape(b, M).mean(axis=1)
    return targets


def candidate_actions(traj, k, noise, seed):
    """k perturbed copies of each executed action, normalized: (B, T, k, 3)."""
    eps = np.stack([sc.rng_for(int(s), seed, 0xCA7).normal(size=(traj.T, k, 3)) for s in traj.episodes.seeds])
    return pl.normalize_actions(traj.actions[:, :, None, :] + noise * eps)


def mc_candidate_targets(params, traj, cands, gamma=0.9, M=5, seed=0, sigma=0.1, env=sc.DEFAULT_ENV):
    """MC targets (B, T, K) for the candidate actions ``cands`` (B, T, K, 3).

    Every candidate reuses the continuation noise of the executed action
    (same ``seed``), so targets at one state differ only through the first
    action; this keeps the action contrast the Q head has to learn out of
    the rollout noise.
    """
    cols = [mc_q_targets(params, traj, gamma, M, seed, sigma, env, actions=cands[:, :, j]) for j in range(cands.shape[2])]
    return np.stack(cols, axis=2)


def qtarget_records(targets, traj, i=0):
    return [QTarget(t, traj.actions[i, t].copy(), float(targets[i, t])) for t in range(traj.T)]


# ---------------------------------------------------------------------------
# DAgger


def collect_on_policy(params, n_episodes, seed, env=sc.DEFAULT_ENV, T=10, sigma=0.1, domain=sc.Domain.SEEN, pool=sc.Pool.TRAIN):
    """POLICY rollouts (mean + exploration noise); labels are expert actions at the visited states."""
    seeds = episode_seeds(seed, n_episodes, 0xDA66)
    counts = sc.rng_for(seed, 0xDA67).choice(np.array([1, 2, 3]), size=n_episodes)
    episodes = sc.sample_episode_batch(seeds, counts, domain, pool, env)
    select = pl.source_selector(pl.ActionSource.POLICY, episodes, T, sigma, seed_tag=0xDA68)
    traj = pl.rollout(params, episodes, T, select, env)
    traj.source = "DAGGER"
    return traj


def relabel(traj, env=sc.DEFAULT_ENV):
    """Expert labels recomputed from the stored arm positions."""
    labels = np.stack([traj.episodes.expert(traj.arm[:, t], env.rho) for t in range(traj.T)], axis=1)
    return labels


def dagger_iteration(params, n_episodes, seed, buffer, cfg, env=sc.DEFAULT_ENV):
    """Collect on-policy episodes, label them with the expert, attach MC Q
    targets computed with the same policy, and append them to ``buffer``."""
    traj = collect_on_policy(params, n_episodes, seed, env, cfg.horizon, cfg.explore_noise)
    traj.labels = relabel(traj, env)
    if cfg.w_value > 0:
        traj.qtargets = mc_q_targets(params, traj, cfg.gamma, cfg.mc_unrolls, seed, cfg.explore_noise, env)
        if cfg.q_candidates:
            traj.qcands = candidate_actions(traj, cfg.q_candidates, cfg.q_candidate_noise, seed)
            traj.qcand_targets = mc_candidate_targets(params, traj, traj.qcands, cfg.gamma, cfg.mc_unrolls, seed, cfg.explore_noise, env)
    buffer.add(traj)
    return traj


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class Curves:
    rows: list = field(default_factory=list)

    def append(self, step, parts):
        self.rows.append((step, parts.supervised, parts.value, parts.localization, parts.total))

    def column(self, name):
        k = ("step", "supervised", "value", "localization", "total").index(name)
        return np.array([r[k] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "supervised", "value", "localization", "total"])
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def train(params, dataset, cfg, steps=None, opt=None, seed=0, curves=None, checkpoint_path=None, config=None, names=None):
    """Minibatch Adam on the combined loss. Mutates and returns ``params``.

    Batch indices for optimizer step t are drawn from a stream keyed by
    (seed, t), so a run resumed from a checkpoint continues identically.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    steps = cfg.steps if steps is None else steps
    opt = cfg.new_optimizer() if opt is None else opt
    curves = Curves() if curves is None else curves
    weights = (cfg.w_supervised, cfg.w_value, cfg.w_localization)
    names = names or params.names()
    for _ in range(steps):
        idx = sc.rng_for(seed, 0x7A, opt.t).integers(0, len(dataset), size=min(cfg.batch_size, len(dataset)))
        batch = dataset.take(np.sort(idx))
        parts, grads = combined_loss(params, batch, weights, names)
        if not math.isfinite(parts.total) or parts.total > 1e6:
            raise DivergenceError(f"loss diverged at step {opt.t}: {parts}")
        adam_step(params, grads, opt)
        curves.append(opt.t, parts)
        if checkpoint_path and cfg.checkpoint_every and opt.t % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, opt, dict(config or {}, params_digest=params.digest()))
    return params, opt, curves


# ---------------------------------------------------------------------------
# Encoder-only adaptation


@dataclass
class LabeledSet:
    obs: np.ndarray
    query: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def make_localization_set(n, seed, shift=None, env=sc.DEFAULT_ENV, domain=sc.Domain.SEEN, pool=sc.Pool.TRAIN, n_objects=(1, 2, 3)):
    """Single observations at random arm positions with target grid labels."""
    seeds = episode_seeds(seed, n, 0xAD40)
    counts = sc.rng_for(seed, 0xAD41).choice(np.array(n_objects), size=n)
    eps = sc.sample_episode_batch(seeds, counts, domain, pool, env)
    return LabeledSet(eps.render(eps.start, shift), eps.query_for(shift), episode_grid_labels(eps))


def encoder_names(params):
    return [n for n in params.names() if n.startswith(pl.ENCODER_PREFIXES)]


def adapt_encoder(params, labeled_set, steps=300, lr=1e-3, batch_size=32, seed=0):
    """Fine-tune only the observation/query encoders on localization cross-entropy.

    Returns a new ParamStore; every non-encoder tensor is copied unchanged.
    """
    if len(labeled_set) == 0:
        raise ValueError("empty labeled set")
    out = params.copy()
    names = encoder_names(out)
    opt = AdamState(lr=lr, decay=1.0)
    n = len(labeled_set)
    for step in range(steps):
        idx = np.sort(sc.rng_for(seed, 0xADA, step).integers(0, n, size=min(batch_size, n)))
        _, grads = localization_loss(out, labeled_set.obs[idx], labeled_set.query[idx], labeled_set.labels[idx])
        adam_step(out, {k: grads[k] for k in names}, opt)
    return out
