"""Randomized reaching scenes, cameras, observations and the expert.

Scalar helpers (``project``, ``step_dynamics``, ``reward`` ...) operate on one
scene; :class:`EpisodeBatch` packs many episodes into arrays so rollouts can
be vectorized through :mod:`srvo.kernels`.
"""
from __future__ import annotations

import enum
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from srvo import kernels

DESC_DIM = 8
MAX_OBJECTS = 3
N_CENTERS = 20
DESC_NOISE = 0.1
QUERY_NOISE = 0.05
OBS_DIM = 2 + MAX_OBJECTS * (2 + DESC_DIM + 1)

# Build constants: fixed seeds for descriptor clusters, camera pools, domain shift.
CENTER_SEED = 20180125
POOL_SEED = 1712_0773
SHIFT_SEED = 5_2_76

SCENE_FORMAT = "srvo-scenes"
SCENE_FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


class ProjectionError(ValueError):
    pass


class Domain(str, enum.Enum):
    SEEN = "SEEN"
    UNSEEN = "UNSEEN"


class Pool(str, enum.Enum):
    TRAIN = "TRAIN"
    HELDOUT = "HELDOUT"


@dataclass(frozen=True)
class EnvConfig:
    v: float = 0.05
    rho: float = 0.05
    workspace_lo: tuple = (-0.5, -0.5, -0.5)
    workspace_hi: tuple = (0.5, 0.5, 0.5)
    table_z: float = -0.4
    focal: float = 1.0
    object_extent: float = 0.4
    min_separation: float = 0.1
    start_min_dist: float = 0.1
    start_max_dist: float = 0.4
    azimuth_center_deg: float = 180.0
    azimuth_span_deg: float = 180.0
    elevation_deg: tuple = (25.0, 65.0)
    radius: tuple = (1.5, 2.5)
    pool_azimuths: int = 20
    pool_elevations: int = 5

    @property
    def lo(self):
        return np.asarray(self.workspace_lo, dtype=np.float64)

    @property
    def hi(self):
        return np.asarray(self.workspace_hi, dtype=np.float64)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))


DEFAULT_ENV = EnvConfig()


def rng_for(*key):
    """Independent generator for an integer key (seed plus stream tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]))


# ---------------------------------------------------------------------------
# Types


@dataclass
class Scene:
    positions: np.ndarray  # (n, 3)
    descriptors: np.ndarray  # (n, DESC_DIM)
    target_index: int
    table_z: float = DEFAULT_ENV.table_z
    workspace_lo: np.ndarray = field(default_factory=lambda: DEFAULT_ENV.lo)
    workspace_hi: np.ndarray = field(default_factory=lambda: DEFAULT_ENV.hi)

    @property
    def n_objects(self):
        return len(self.positions)

    @property
    def target(self):
        return self.positions[self.target_index]

    def to_dict(self):
        return {
            "objects": [
                {"position": p.tolist(), "descriptor": d.tolist()}
                for p, d in zip(self.positions, self.descriptors)
            ],
            "target_index": int(self.target_index),
            "table_z": float(self.table_z),
            "workspace": {"min": list(map(float, self.workspace_lo)), "max": list(map(float, self.workspace_hi))},
        }

    @classmethod
    def from_dict(cls, d):
        objs = d["objects"]
        return cls(
            positions=np.array([o["position"] for o in objs], dtype=np.float64).reshape(-1, 3),
            descriptors=np.array([o["descriptor"] for o in objs], dtype=np.float64).reshape(-1, DESC_DIM),
            target_index=int(d["target_index"]),
            table_z=float(d["table_z"]),
            workspace_lo=np.array(d["workspace"]["min"], dtype=np.float64),
            workspace_hi=np.array(d["workspace"]["max"], dtype=np.float64),
        )


@dataclass
class Camera:
    rotation: np.ndarray  # world -> camera, rows = (right, down, forward)
    position: np.ndarray
    focal: float = 1.0

    @classmethod
    def look_at(cls, position, target, focal=1.0, up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise ValueError("look_at: view direction parallel to up vector")
        right /= n
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward]), position, float(focal))

    def to_dict(self):
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "position": self.position.tolist(),
            "focal": self.focal,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(d["position"], dtype=np.float64),
            float(d["focal"]),
        )


@dataclass
class Observation:
    effector_uv: np.ndarray  # (2,)
    slot_uv: np.ndarray  # (MAX_OBJECTS, 2)
    slot_descriptor: np.ndarray  # (MAX_OBJECTS, DESC_DIM)
    present: np.ndarray  # (MAX_OBJECTS,)

    def as_vector(self):
        slots = np.concatenate([self.slot_uv, self.slot_descriptor, self.present[:, None]], axis=1)
        return np.concatenate([self.effector_uv, slots.reshape(-1)])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        slots = vec[2:].reshape(MAX_OBJECTS, 2 + DESC_DIM + 1)
        return cls(vec[:2].copy(), slots[:, :2].copy(), slots[:, 2 : 2 + DESC_DIM].copy(), slots[:, -1].copy())


@dataclass(frozen=True)
class DescriptorShift:
    """Fixed affine map on observed appearance descriptors (the shifted domain).

    The query descriptor is not mapped, so a shifted scene no longer matches
    its query the way training scenes did."""

    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, desc):
        return desc @ self.matrix.T + self.offset

    @property
    def condition_number(self):
        return float(np.linalg.cond(self.matrix))


# ---------------------------------------------------------------------------
# Build constants


@functools.lru_cache(maxsize=None)
def descriptor_centers(domain):
    """20 cluster centers per domain; the two sets are disjoint draws."""
    rng = rng_for(CENTER_SEED)
    centers = rng.normal(size=(2 * N_CENTERS, DESC_DIM))
    centers.setflags(write=False)
    return centers[:N_CENTERS] if Domain(domain) is Domain.SEEN else centers[N_CENTERS:]


@functools.lru_cache(maxsize=None)
def default_shift(max_condition=5.0):
    rng = rng_for(SHIFT_SEED)
    q1, _ = np.linalg.qr(rng.normal(size=(DESC_DIM, DESC_DIM)))
    q2, _ = np.linalg.qr(rng.normal(size=(DESC_DIM, DESC_DIM)))
    s = np.exp(rng.uniform(0.0, np.log(max_condition), size=DESC_DIM))
    s[np.argmin(s)] = 1.0
    s[np.argmax(s)] = max_condition
    s = s / math.sqrt(max_condition)
    offset = rng.normal(scale=0.3, size=DESC_DIM)
    return DescriptorShift(q1 @ np.diag(s) @ q2, offset)


def _pool_placements(pool, env):
    """(azimuth, elevation) grid; HELDOUT interleaves TRAIN at half steps."""
    na, ne = env.pool_azimuths, env.pool_elevations
    frac = 0.25 if Pool(pool) is Pool.TRAIN else 0.75
    az0 = math.radians(env.azimuth_center_deg - env.azimuth_span_deg / 2)
    span = math.radians(env.azimuth_span_deg)
    el_lo, el_hi = map(math.radians, env.elevation_deg)
    az = az0 + span * (np.arange(na) + frac) / na
    el = el_lo + (el_hi - el_lo) * (np.arange(ne) + frac) / ne
    return [(a, e) for e in el for a in az]


def camera_pool(pool, env=DEFAULT_ENV):
    return _camera_pool(Pool(pool), env)


@functools.lru_cache(maxsize=None)
def _camera_pool(pool, env):
    placements = _pool_placements(pool, env)
    rng = rng_for(POOL_SEED, 0 if Pool(pool) is Pool.TRAIN else 1)
    radii = rng.uniform(env.radius[0], env.radius[1], size=len(placements))
    center = env.center
    cams = []
    for (az, el), r in zip(placements, radii):
        offset = r * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(center + offset, center, env.focal))
    return tuple(cams)


# ---------------------------------------------------------------------------
# Samplers


def sample_scene(seed, n_objects, descriptor_domain=Domain.SEEN, env=DEFAULT_ENV):
    if n_objects not in (1, 2, 3):
        raise ValueError(f"n_objects must be 1, 2 or 3, got {n_objects}")
    rng = rng_for(seed, 1)
    ext = env.object_extent
    for _ in range(1000):
        xy = rng.uniform(-ext, ext, size=(n_objects, 2))
        diff = xy[:, None, :] - xy[None, :, :]
        dist = np.sqrt((diff**2).sum(-1)) + np.eye(n_objects) * 1e9
        if dist.min() >= env.min_separation:
            break
    else:
        raise GenerationError(f"no non-overlapping placement after 1000 attempts (seed={seed})")
    positions = np.column_stack([xy, np.full(n_objects, env.table_z)])
    centers = descriptor_centers(Domain(descriptor_domain))
    chosen = rng.choice(N_CENTERS, size=n_objects, replace=False)
    descriptors = centers[chosen] + rng.normal(scale=DESC_NOISE, size=(n_objects, DESC_DIM))
    target = int(rng.integers(n_objects))
    return Scene(positions, descriptors, target, env.table_z, env.lo, env.hi)


def sample_camera(seed, viewpoint_pool=Pool.TRAIN, env=DEFAULT_ENV):
    cams = camera_pool(Pool(viewpoint_pool), env)
    return cams[int(rng_for(seed, 2).integers(len(cams)))]


def sample_query(scene, seed):
    noise = rng_for(seed, 3).uniform(-QUERY_NOISE, QUERY_NOISE, size=DESC_DIM)
    return scene.descriptors[scene.target_index] + noise


def sample_slot_permutation(seed):
    return rng_for(seed, 4).permutation(MAX_OBJECTS)


def sample_start(scene, seed, env=DEFAULT_ENV):
    """Random effector start inside the workspace, above the table, within reach of the target."""
    rng = rng_for(seed, 5)
    lo = env.lo.copy()
    lo[2] = env.table_z
    for _ in range(1000):
        x = rng.uniform(lo, env.hi)
        d = np.linalg.norm(x - scene.target)
        if env.start_min_dist <= d <= env.start_max_dist:
            return x
    raise GenerationError(f"no start position found (seed={seed})")


# ---------------------------------------------------------------------------
# Geometry, dynamics, reward, expert


def project(camera, point):
    point = np.asarray(point, dtype=np.float64)
    pc = camera.rotation @ (point - camera.position)
    if not pc[2] > 1e-6:
        raise ProjectionError(f"point has non-positive camera depth {pc[2]:.3g}")
    return camera.focal * pc[:2] / pc[2]


def render_observation(scene, arm_position, camera, slot_perm, shift=None):
    eff = project(camera, arm_position)
    slot_uv = np.zeros((MAX_OBJECTS, 2))
    slot_desc = np.zeros((MAX_OBJECTS, DESC_DIM))
    present = np.zeros(MAX_OBJECTS)
    desc = scene.descriptors if shift is None else shift.apply(scene.descriptors)
    for s, obj in enumerate(slot_perm):
        if obj < scene.n_objects:
            slot_uv[s] = project(camera, scene.positions[obj])
            slot_desc[s] = desc[obj]
            present[s] = 1.0
    return Observation(eff, slot_uv, slot_desc, present)


def clamp_workspace(x, env=DEFAULT_ENV):
    return np.clip(x, env.lo, env.hi)


def step_dynamics(arm_position, action, v=DEFAULT_ENV.v, env=DEFAULT_ENV):
    if v <= 0:
        raise ValueError("velocity must be positive")
    x = np.asarray(arm_position, dtype=np.float64)[None, :]
    a = np.asarray(action, dtype=np.float64)[None, :]
    return kernels.step_batch(x, a, float(v), env.lo, env.hi)[0]


def reward(arm_position, scene, rho=DEFAULT_ENV.rho):
    return int(np.linalg.norm(np.asarray(arm_position) - scene.target) <= rho)


def expert_action(arm_position, scene, rho=DEFAULT_ENV.rho):
    delta = scene.target - np.asarray(arm_position, dtype=np.float64)
    n = np.linalg.norm(delta)
    if n <= rho:
        return np.zeros(3)
    return delta / n


def final_distance(arm_position, scene):
    return float(np.linalg.norm(np.asarray(arm_position) - scene.target))


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class EpisodeSetup:
    """Everything fixed for one episode: scene, camera, query, slot order, start."""

    seed: int
    scene: Scene
    camera: Camera
    query: np.ndarray
    slot_perm: np.ndarray
    start: np.ndarray


def sample_episode(seed, n_objects, domain=Domain.SEEN, pool=Pool.TRAIN, env=DEFAULT_ENV):
    scene = sample_scene(seed, n_objects, domain, env)
    return EpisodeSetup(
        seed=int(seed),
        scene=scene,
        camera=sample_camera(seed, pool, env),
        query=sample_query(scene, seed),
        slot_perm=sample_slot_permutation(seed),
        start=sample_start(scene, seed, env),
    )


@dataclass
class EpisodeBatch:
    """Array view of B episode setups, padded to MAX_OBJECTS objects."""

    seeds: np.ndarray  # (B,) int64
    positions: np.ndarray  # (B, 3, 3)
    descriptors: np.ndarray  # (B, 3, DESC_DIM)
    n_objects: np.ndarray  # (B,)
    target_index: np.ndarray  # (B,)
    slot_perm: np.ndarray  # (B, 3)
    cam_rot: np.ndarray  # (B, 3, 3)
    cam_pos: np.ndarray  # (B, 3)
    query: np.ndarray  # (B, DESC_DIM)
    start: np.ndarray  # (B, 3)
    focal: float = 1.0

    def __len__(self):
        return len(self.seeds)

    @classmethod
    def from_setups(cls, setups):
        b = len(setups)
        pos = np.zeros((b, MAX_OBJECTS, 3))
        desc = np.zeros((b, MAX_OBJECTS, DESC_DIM))
        for i, s in enumerate(setups):
            n = s.scene.n_objects
            pos[i, :n] = s.scene.positions
            desc[i, :n] = s.scene.descriptors
        return cls(
            seeds=np.array([s.seed for s in setups], dtype=np.int64),
            positions=pos,
            descriptors=desc,
            n_objects=np.array([s.scene.n_objects for s in setups], dtype=np.int64),
            target_index=np.array([s.scene.target_index for s in setups], dtype=np.int64),
            slot_perm=np.array([s.slot_perm for s in setups], dtype=np.int64).reshape(b, MAX_OBJECTS),
            cam_rot=np.array([s.camera.rotation for s in setups]).reshape(b, 3, 3),
            cam_pos=np.array([s.camera.position for s in setups]).reshape(b, 3),
            query=np.array([s.query for s in setups]).reshape(b, DESC_DIM),
            start=np.array([s.start for s in setups]).reshape(b, 3),
            focal=setups[0].camera.focal if setups else 1.0,
        )

    @classmethod
    def concat(cls, batches):
        names = ["seeds", "positions", "descriptors", "n_objects", "target_index", "slot_perm", "cam_rot", "cam_pos", "query", "start"]
        return cls(**{n: np.concatenate([getattr(b, n) for b in batches]) for n in names}, focal=batches[0].focal)

    def take(self, idx):
        names = ["seeds", "positions", "descriptors", "n_objects", "target_index", "slot_perm", "cam_rot", "cam_pos", "query", "start"]
        return EpisodeBatch(**{n: getattr(self, n)[idx] for n in names}, focal=self.focal)

    def repeat(self, m):
        """Each episode repeated m times consecutively."""
        return self.take(np.repeat(np.arange(len(self)), m))

    def setup(self, i, env=DEFAULT_ENV):
        n = int(self.n_objects[i])
        scene = Scene(self.positions[i, :n].copy(), self.descriptors[i, :n].copy(), int(self.target_index[i]), env.table_z, env.lo, env.hi)
        return EpisodeSetup(int(self.seeds[i]), scene, Camera(self.cam_rot[i].copy(), self.cam_pos[i].copy(), self.focal), self.query[i].copy(), self.slot_perm[i].copy(), self.start[i].copy())

    @property
    def targets(self):
        return self.positions[np.arange(len(self)), self.target_index]

    @property
    def object_present(self):
        return (np.arange(MAX_OBJECTS)[None, :] < self.n_objects[:, None]).astype(np.float64)

    def project(self, points):
        """points (B, P, 3) -> uv (B, P, 2); raises on non-positive depth."""
        uv, min_depth = kernels.project_batch(self.cam_rot, self.cam_pos, np.ascontiguousarray(points), float(self.focal))
        if len(self) and not min_depth > 1e-6:
            raise ProjectionError(f"point has non-positive camera depth {min_depth:.3g}")
        return uv

    def render(self, arm, shift=None):
        """Flat observation vectors (B, OBS_DIM) for arm positions (B, 3)."""
        b = len(self)
        uv = self.project(np.concatenate([arm[:, None, :], self.positions], axis=1))
        desc = self.descriptors if shift is None else shift.apply(self.descriptors)
        present = self.object_present
        rows = np.arange(b)[:, None]
        perm = self.slot_perm
        valid = perm < self.n_objects[:, None]
        idx = np.where(valid, perm, 0)
        slot_uv = uv[:, 1:][rows, idx] * valid[..., None]
        slot_desc = desc[rows, idx] * valid[..., None]
        slot_present = present[rows, idx] * valid
        slots = np.concatenate([slot_uv, slot_desc, slot_present[..., None]], axis=2)
        return np.concatenate([uv[:, 0], slots.reshape(b, -1)], axis=1)

    def query_for(self, shift=None):
        # the query comes from the clean catalogue; a shift only alters what the camera sees
        return self.query

    def expert(self, arm, rho=DEFAULT_ENV.rho):
        delta = self.targets - arm
        n = np.linalg.norm(delta, axis=1)
        out = np.zeros_like(delta)
        far = n > rho
        out[far] = delta[far] / n[far, None]
        return out

    def distance(self, arm):
        return np.linalg.norm(arm - self.targets, axis=1)

    def reward(self, arm, rho=DEFAULT_ENV.rho):
        return (self.distance(arm) <= rho).astype(np.float64)


def step_batch(arm, actions, env=DEFAULT_ENV):
    return kernels.step_batch(np.ascontiguousarray(arm), np.ascontiguousarray(actions), float(env.v), env.lo, env.hi)


def sample_episode_batch(seeds, n_objects, domain=Domain.SEEN, pool=Pool.TRAIN, env=DEFAULT_ENV):
    """``n_objects`` may be an int or a per-seed sequence."""
    if np.isscalar(n_objects):
        n_objects = [int(n_objects)] * len(seeds)
    return EpisodeBatch.from_setups([sample_episode(int(s), int(n), domain, pool, env) for s, n in zip(seeds, n_objects)])


# ---------------------------------------------------------------------------
# Serialization


def pools_document(env=DEFAULT_ENV, scenes=None):
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_FORMAT_VERSION,
        "pools": {p.value: [c.to_dict() for c in camera_pool(p, env)] for p in Pool},
        "descriptor_centers": {d.value: descriptor_centers(d).tolist() for d in Domain},
    }
    if scenes is not None:
        doc["scenes"] = [s.to_dict() for s in scenes]
    return doc


def dump_pools(path, env=DEFAULT_ENV, scenes=None):
    with open(path, "w") as fh:
        json.dump(pools_document(env, scenes), fh, indent=1, sort_keys=True)


def load_pools(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"{path}: not a {SCENE_FORMAT} document")
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    pools = {Pool(k): [Camera.from_dict(c) for c in v] for k, v in doc["pools"].items()}
    scenes = [Scene.from_dict(s) for s in doc.get("scenes", [])]
    return pools, scenes
