"""Recurrent servoing policy, its reactive ablation, and episode rollouts.

Layout of one forward step::

    slots (uv, descriptor, present, query, effector uv) -> shared 2x64 ReLU
    slot features -> scalar query-match score (head_loc) -> softmax-weighted pool
    query -> 2x32 ReLU
    previous action -> 64 ReLU
    concat -> LSTM(64)  |  reactive: 2x64 ReLU
    trunk -> action head (64 ReLU -> 3), Q head (on trunk + embedded candidate)
    slot scores placed at their 8x8 grid cells -> localization logits
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from srvo import scene as sc
from srvo.nn import RELU, ParamStore, ShapeError, Tape

UV_SCALE = 4.0
GRID = 8
LOC_EMPTY = -20.0  # logit of grid cells without any object
SLOT_IN = 2 + sc.DESC_DIM + 1 + sc.DESC_DIM + 2

RECURRENT = "recurrent"
REACTIVE = "reactive"
ENCODER_PREFIXES = ("enc_obs/", "enc_query/")


@dataclass(frozen=True)
class Widths:
    obs: int = 64
    query: int = 32
    action: int = 64
    core: int = 64
    head: int = 64

    @property
    def core_in(self):
        return self.obs + 2 + self.query + self.action


DEFAULT_WIDTHS = Widths()


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch=None, units=DEFAULT_WIDTHS.core):
        shape = (units,) if batch is None else (batch, units)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class PolicyOutput:
    action_mean: np.ndarray
    trunk_features: np.ndarray
    localization_logits: np.ndarray


def _layer_shapes(variant, w):
    shapes = {
        "enc_obs/slot1": (w.obs, SLOT_IN),
        "enc_obs/slot2": (w.obs, w.obs),
        "enc_query/l1": (w.query, sc.DESC_DIM),
        "enc_query/l2": (w.query, w.query),
        "act_embed": (w.action, 3),
        "head_action/fc": (w.head, w.core),
        "head_action/out": (3, w.head),
        "head_q/fc1": (w.head, w.core + w.action),
        "head_q/fc2": (w.head, w.head),
        "head_q/out": (1, w.head),
        "head_loc": (1, w.obs),
    }
    if variant == RECURRENT:
        shapes["core/lstm"] = (4 * w.core, w.core_in)
    elif variant == REACTIVE:
        shapes["core/fc1"] = (w.core, w.core_in)
        shapes["core/fc2"] = (w.core, w.core)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return shapes


def param_shapes(variant, widths=DEFAULT_WIDTHS):
    out = {}
    for layer, (m, n) in _layer_shapes(variant, widths).items():
        out[layer + "/W"] = (m, n)
        out[layer + "/b"] = (m,)
        if layer == "core/lstm":
            out[layer + "/U"] = (m, widths.core)
    return out


def init_params(variant=RECURRENT, seed=0, widths=DEFAULT_WIDTHS):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); LSTM forget-gate bias +1."""
    rng = sc.rng_for(seed, 0x9A7A)
    store = ParamStore()
    for name, shape in sorted(param_shapes(variant, widths).items()):
        layer = name.rsplit("/", 1)[0]
        fan_in = _layer_shapes(variant, widths)[layer][1]
        s = 1.0 / math.sqrt(fan_in)
        store.add(name, rng.uniform(-s, s, size=shape))
    if variant == RECURRENT:
        u = widths.core
        b = store["core/lstm/b"]
        b[u : 2 * u] = 1.0
        store["core/lstm/b"] = b
    return store


def variant_of(params):
    return RECURRENT if "core/lstm/W" in params else REACTIVE


def widths_of(params):
    return Widths(
        obs=params["enc_obs/slot1/W"].shape[0],
        query=params["enc_query/l1/W"].shape[0],
        action=params["act_embed/W"].shape[0],
        core=params["head_action/fc/W"].shape[1],
        head=params["head_action/fc/W"].shape[0],
    )


def count_params(variant, widths=DEFAULT_WIDTHS):
    return sum(int(np.prod(s)) for s in param_shapes(variant, widths).values())


# ---------------------------------------------------------------------------
# Graph pieces (shared by the numeric forward and the training tape)


def slot_inputs(obs, query):
    """obs (..., OBS_DIM), query (..., DESC_DIM) -> per-slot features (..., 3, SLOT_IN), present (..., 3)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != sc.OBS_DIM:
        raise ShapeError(f"observation has {obs.shape[-1]} features, expected {sc.OBS_DIM}")
    lead = obs.shape[:-1]
    eff = obs[..., :2] * UV_SCALE
    slots = obs[..., 2:].reshape(*lead, sc.MAX_OBJECTS, 2 + sc.DESC_DIM + 1)
    present = slots[..., -1]
    q = np.broadcast_to(np.asarray(query)[..., None, :], (*lead, sc.MAX_OBJECTS, sc.DESC_DIM))
    e = np.broadcast_to(eff[..., None, :], (*lead, sc.MAX_OBJECTS, 2))
    feats = np.concatenate([slots[..., :2] * UV_SCALE, slots[..., 2:], q, e], axis=-1)
    return feats, present


def slot_cells(obs):
    """8x8 grid cell of every slot's image position, (..., 3) ints."""
    obs = np.asarray(obs, dtype=np.float64)
    uv = obs[..., 2:].reshape(*obs.shape[:-1], sc.MAX_OBJECTS, 2 + sc.DESC_DIM + 1)[..., :2]
    return grid_cells(uv)


def grid_cells(uv, grid=GRID):
    uv = np.asarray(uv, dtype=np.float64)
    col = np.clip(np.floor((uv[..., 0] + 1.0) / 2.0 * grid), 0, grid - 1).astype(np.int64)
    row = np.clip(np.floor((uv[..., 1] + 1.0) / 2.0 * grid), 0, grid - 1).astype(np.int64)
    return row * grid + col


def _encoders(tp, P, obs, query, prev_action):
    """Slot features are scored against the query by head_loc; the scores both
    weight the pooling and, placed at each slot's grid cell, form the
    localization logits. Returns pooled, eff, q, a, logits."""
    feats, present = slot_inputs(obs, query)
    s = tp.dense(tp.const(feats), P["enc_obs/slot1/W"], P["enc_obs/slot1/b"], RELU)
    s = tp.dense(s, P["enc_obs/slot2/W"], P["enc_obs/slot2/b"], RELU)
    score = tp.reshape(tp.dense(s, P["head_loc/W"], P["head_loc/b"]), present.shape)
    pooled = tp.attend(s, score, present)
    logits = tp.cell_logits(score, slot_cells(obs), present, GRID * GRID, LOC_EMPTY)
    eff = tp.const(np.asarray(obs)[..., :2] * UV_SCALE)
    qv = tp.const(query)
    q = tp.dense(qv, P["enc_query/l1/W"], P["enc_query/l1/b"], RELU)
    q = tp.dense(q, P["enc_query/l2/W"], P["enc_query/l2/b"], RELU)
    a = tp.dense(tp.const(prev_action), P["act_embed/W"], P["act_embed/b"], RELU)
    return pooled, eff, q, a, logits


def localization_graph(tp, P, obs, query):
    return _encoders(tp, P, obs, query, np.zeros((*np.shape(obs)[:-1], 3)))[4]


def _action_head(tp, P, trunk):
    x = tp.dense(trunk, P["head_action/fc/W"], P["head_action/fc/b"], RELU)
    return tp.dense(x, P["head_action/out/W"], P["head_action/out/b"])


def _reactive_core(tp, P, x):
    x = tp.dense(x, P["core/fc1/W"], P["core/fc1/b"], RELU)
    return tp.dense(x, P["core/fc2/W"], P["core/fc2/b"], RELU)


def q_graph(tp, P, trunk, action):
    emb = tp.dense(action, P["act_embed/W"], P["act_embed/b"], RELU)
    x = tp.dense(tp.concat([trunk, emb]), P["head_q/fc1/W"], P["head_q/fc1/b"], RELU)
    x = tp.dense(x, P["head_q/fc2/W"], P["head_q/fc2/b"], RELU)
    return tp.dense(x, P["head_q/out/W"], P["head_q/out/b"])


def sequence_graph(tp, params, obs, prev_actions, query):
    """Teacher-forced unroll on a tape.

    obs (B, T, OBS_DIM), prev_actions (B, T, 3), query (B, DESC_DIM).
    Returns dict of nodes: action (B, T, 3), trunk (B, T, core), logits (B, T, 64).
    """
    P = tp.params(params)
    b, T = obs.shape[:2]
    qseq = np.broadcast_to(query[:, None, :], (b, T, query.shape[-1]))
    pooled, eff, q, a, logits = _encoders(tp, P, obs, qseq, prev_actions)
    x = tp.concat([pooled, eff, q, a])
    if variant_of(params) == RECURRENT:
        u = params["core/lstm/U"].shape[1]
        h = tp.const(np.zeros((b, u)))
        c = tp.const(np.zeros((b, u)))
        outs = []
        for t in range(T):
            hc = tp.lstm(tp.index(x, t), h, c, P["core/lstm/W"], P["core/lstm/U"], P["core/lstm/b"])
            h = tp.slice(hc, 0, u)
            c = tp.slice(hc, u, 2 * u)
            outs.append(h)
        trunk = tp.stack(outs, axis=1)
    else:
        trunk = _reactive_core(tp, P, x)
    action = _action_head(tp, P, trunk)
    return {"action": action, "trunk": trunk, "logits": logits, "P": P}


# ---------------------------------------------------------------------------
# Numeric API


def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def policy_forward(params, obs, prev_action, query, state):
    """One recurrent step: (o_t, a_{t-1}, q, h_t) -> (output, new state).

    Accepts single vectors or a leading batch axis. ``obs`` may be an
    :class:`~srvo.scene.Observation` or its flat vector. The input state is
    not modified.
    """
    if variant_of(params) != RECURRENT:
        raise ValueError("policy_forward needs recurrent parameters; use reactive_forward")
    if isinstance(obs, sc.Observation):
        obs = obs.as_vector()
    obs, single = _as_batch(obs, sc.OBS_DIM)
    prev = np.atleast_2d(np.asarray(prev_action, dtype=np.float64))
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    h = np.atleast_2d(state.h)
    c = np.atleast_2d(state.c)
    tp = Tape(record=False)
    P = tp.params(params)
    pooled, eff, q, a, logits = _encoders(tp, P, obs, query, prev)
    x = tp.concat([pooled, eff, q, a])
    u = params["core/lstm/U"].shape[1]
    hc = tp.lstm(x, tp.const(h), tp.const(c), P["core/lstm/W"], P["core/lstm/U"], P["core/lstm/b"])
    trunk = tp.slice(hc, 0, u)
    action = _action_head(tp, P, trunk)
    out = PolicyOutput(action.value, trunk.value, logits.value)
    new = RecurrentState(hc.value[:, :u], hc.value[:, u:])
    if single:
        out = PolicyOutput(out.action_mean[0], out.trunk_features[0], out.localization_logits[0])
        new = RecurrentState(new.h[0], new.c[0])
    return out, new


def reactive_forward(params, obs, prev_action, query):
    if variant_of(params) != REACTIVE:
        raise ValueError("reactive_forward needs reactive parameters")
    if isinstance(obs, sc.Observation):
        obs = obs.as_vector()
    obs, single = _as_batch(obs, sc.OBS_DIM)
    prev = np.atleast_2d(np.asarray(prev_action, dtype=np.float64))
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    tp = Tape(record=False)
    P = tp.params(params)
    pooled, eff, q, a, logits = _encoders(tp, P, obs, query, prev)
    trunk = _reactive_core(tp, P, tp.concat([pooled, eff, q, a]))
    action = _action_head(tp, P, trunk)
    out = PolicyOutput(action.value, trunk.value, logits.value)
    if single:
        out = PolicyOutput(out.action_mean[0], out.trunk_features[0], out.localization_logits[0])
    return out


def forward_any(params, obs, prev_action, query, state):
    """Dispatch on variant; reactive ignores and returns ``state``."""
    if variant_of(params) == RECURRENT:
        return policy_forward(params, obs, prev_action, query, state)
    return reactive_forward(params, obs, prev_action, query), state


def q_value(params, trunk_features, candidate):
    """Q(trunk, candidate). Shapes (..., core) and (..., 3) broadcast against each other."""
    trunk_features = np.asarray(trunk_features, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    lead = np.broadcast_shapes(trunk_features.shape[:-1], candidate.shape[:-1])
    trunk = np.broadcast_to(trunk_features, (*lead, trunk_features.shape[-1]))
    cand = np.broadcast_to(candidate, (*lead, 3))
    tp = Tape(record=False)
    out = q_graph(tp, tp.params(params), tp.const(trunk), tp.const(cand)).value[..., 0]
    return float(out) if out.ndim == 0 else out


def q_value_grad(params, trunk_features, candidate):
    """d Q / d candidate for a single (trunk, candidate) pair."""
    tp = Tape()
    P = tp.params(params)
    a = tp.param("__candidate__", np.asarray(candidate, dtype=np.float64)[None, :])
    q = q_graph(tp, P, tp.const(np.asarray(trunk_features)[None, :]), a)
    return tp.backward(tp.sum(q), names=["__candidate__"])["__candidate__"][0]


# ---------------------------------------------------------------------------
# Rollouts


class ActionSource(str, enum.Enum):
    POLICY = "POLICY"
    EXPERT = "EXPERT"
    EXPERT_NOISY = "EXPERT_NOISY"


def normalize_actions(a):
    a = np.asarray(a, dtype=np.float64)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    # already-unit rows pass through untouched so normalization is idempotent
    n = np.where(np.abs(n - 1.0) < 1e-12, 1.0, n)
    return np.where(n > 1e-8, a / np.where(n > 1e-8, n, 1.0), 0.0)


@dataclass
class Trajectories:
    """B episodes of T steps. Step t records the observation o_t, the executed
    unit action a_t, the expert label at x_t, the reward after the action,
    and x_t itself; ``arm`` has T+1 rows (the final position last)."""

    episodes: sc.EpisodeBatch
    obs: np.ndarray  # (B, T, OBS_DIM)
    actions: np.ndarray  # (B, T, 3)
    labels: np.ndarray  # (B, T, 3)
    rewards: np.ndarray  # (B, T)
    arm: np.ndarray  # (B, T+1, 3)
    trunk: np.ndarray | None = None  # (B, T, core)
    qtargets: np.ndarray | None = None  # (B, T), NaN where unset
    source: str = ""
    qcands: np.ndarray | None = None  # (B, T, K, 3) extra unit actions scored by the Q head
    qcand_targets: np.ndarray | None = None  # (B, T, K), NaN where unset

    def __len__(self):
        return len(self.episodes)

    @property
    def T(self):
        return self.obs.shape[1]

    def prev_actions(self):
        """a_{t-1} inputs under teacher forcing; a_0 is the zero action."""
        prev = np.zeros_like(self.actions)
        prev[:, 1:] = self.actions[:, :-1]
        return prev

    def final_distance(self):
        return self.episodes.distance(self.arm[:, -1])

    def take(self, idx):
        idx = np.asarray(idx)
        return Trajectories(
            self.episodes.take(idx),
            self.obs[idx],
            self.actions[idx],
            self.labels[idx],
            self.rewards[idx],
            self.arm[idx],
            None if self.trunk is None else self.trunk[idx],
            None if self.qtargets is None else self.qtargets[idx],
            self.source,
            None if self.qcands is None else self.qcands[idx],
            None if self.qcand_targets is None else self.qcand_targets[idx],
        )

    @classmethod
    def concat(cls, trajs):
        trajs = [t for t in trajs if len(t)]
        if not trajs:
            raise ValueError("nothing to concatenate")
        has_trunk = all(t.trunk is not None for t in trajs)
        q = [t.qtargets if t.qtargets is not None else np.full(t.rewards.shape, np.nan) for t in trajs]
        ks = {t.qcands.shape[2] for t in trajs if t.qcands is not None}
        if len(ks) > 1:
            raise ValueError(f"mixed candidate counts {sorted(ks)}")
        qc = qct = None
        if ks:
            k = ks.pop()
            qc = np.concatenate([t.qcands if t.qcands is not None else np.zeros((*t.rewards.shape, k, 3)) for t in trajs])
            qct = np.concatenate(
                [t.qcand_targets if t.qcands is not None else np.full((*t.rewards.shape, k), np.nan) for t in trajs]
            )
        return cls(
            sc.EpisodeBatch.concat([t.episodes for t in trajs]),
            np.concatenate([t.obs for t in trajs]),
            np.concatenate([t.actions for t in trajs]),
            np.concatenate([t.labels for t in trajs]),
            np.concatenate([t.rewards for t in trajs]),
            np.concatenate([t.arm for t in trajs]),
            np.concatenate([t.trunk for t in trajs]) if has_trunk else None,
            np.concatenate(q),
            trajs[0].source if len({t.source for t in trajs}) == 1 else "mixed",
            qc,
            qct,
        )

    def steps(self, i=0):
        """Per-step records of episode ``i`` as dicts."""
        return [
            {
                "observation": self.obs[i, t],
                "executed_action": self.actions[i, t],
                "expert_label": self.labels[i, t],
                "reward": self.rewards[i, t],
                "arm_position": self.arm[i, t],
                "trunk_features": None if self.trunk is None else self.trunk[i, t],
            }
            for t in range(self.T)
        ]


def episode_noise(seeds, T, tag, dim=3):
    """Standard normal noise (B, T, dim), one independent stream per episode seed."""
    return np.stack([sc.rng_for(int(s), tag).normal(size=(T, dim)) for s in seeds]) if len(seeds) else np.zeros((0, T, dim))


def rollout(params, episodes, T=10, select=None, env=sc.DEFAULT_ENV, shift=None, arm0=None, state0=None, prev0=None):
    """Run B episodes for T steps.

    ``select(t, output, arm)`` returns raw actions (B, 3) and defaults to the
    policy mean; ``output`` is None when ``params`` is None. Executed actions
    are unit directions (or zero).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    b = len(episodes)
    arm = episodes.start.copy() if arm0 is None else np.array(arm0, dtype=np.float64)
    prev = np.zeros((b, 3)) if prev0 is None else np.array(prev0, dtype=np.float64)
    query = episodes.query_for(shift)
    recurrent = params is not None and variant_of(params) == RECURRENT
    state = None
    if recurrent:
        u = params["core/lstm/U"].shape[1]
        state = RecurrentState.zeros(b, u) if state0 is None else state0
    obs_log = np.zeros((b, T, sc.OBS_DIM))
    act_log = np.zeros((b, T, 3))
    lab_log = np.zeros((b, T, 3))
    rew_log = np.zeros((b, T))
    arm_log = np.zeros((b, T + 1, 3))
    trunk_log = None
    for t in range(T):
        obs = episodes.render(arm, shift)
        out = None
        if params is not None:
            out, state = forward_any(params, obs, prev, query, state)
            if trunk_log is None:
                trunk_log = np.zeros((b, T, out.trunk_features.shape[-1]))
            trunk_log[:, t] = out.trunk_features
        raw = out.action_mean if select is None else select(t, out, arm)
        executed = normalize_actions(raw)
        obs_log[:, t] = obs
        act_log[:, t] = executed
        lab_log[:, t] = episodes.expert(arm, env.rho)
        arm_log[:, t] = arm
        arm = sc.step_batch(arm, executed, env)
        rew_log[:, t] = episodes.reward(arm, env.rho)
        prev = executed
    arm_log[:, T] = arm
    return Trajectories(episodes, obs_log, act_log, lab_log, rew_log, arm_log, trunk_log)


def source_selector(source, episodes, T, sigma=0.0, seeds=None, seed_tag=0x5E1, env=sc.DEFAULT_ENV):
    """Action function for ``rollout``; Gaussian noise is keyed by per-episode seeds."""
    source = ActionSource(source)
    seeds = episodes.seeds if seeds is None else seeds
    noise = episode_noise(seeds, T, seed_tag) * sigma if sigma > 0 else None

    def select(t, out, arm):
        if source is ActionSource.POLICY:
            base = out.action_mean
        else:
            base = episodes.expert(arm, env.rho)
        if noise is not None and source is not ActionSource.EXPERT:
            base = base + noise[:, t]
        return base

    return select


def unroll(params, setup, camera=None, T=10, action_source=ActionSource.POLICY, seed=0, sigma=0.0, env=sc.DEFAULT_ENV, shift=None):
    """Single-episode rollout from an :class:`~srvo.scene.EpisodeSetup`.

    ``camera`` overrides the setup's camera. ``seed`` keys the action noise.
    """
    if camera is not None:
        setup = sc.EpisodeSetup(setup.seed, setup.scene, camera, setup.query, setup.slot_perm, setup.start)
    episodes = sc.EpisodeBatch.from_setups([setup])
    src = ActionSource(action_source)
    if src is ActionSource.POLICY and params is None:
        raise ValueError("POLICY source needs parameters")
    select = source_selector(src, episodes, T, sigma, seeds=[seed], env=env)
    traj = rollout(params, episodes, T, select, env, shift)
    traj.source = src.value
    return traj
