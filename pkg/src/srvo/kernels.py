"""Hot numeric kernels.

Each kernel exists twice: a loop version compiled with numba and a vectorized
numpy version. The module-level names dispatch to one of them depending on
``SRVO_NUMBA`` (see :mod:`srvo._jit`). Both paths agree to ~1e-12.
"""
import math

import numpy as np

from srvo._jit import HAVE_NUMBA, USE_NUMBA, njit

GATE_CLIP = 50.0


# ---------------------------------------------------------------------------
# LSTM pointwise part. Gate layout along the last axis: [i, f, o, g].


def _lstm_pointwise_numpy(pre, c_prev):
    u = c_prev.shape[1]
    z = np.clip(pre, -GATE_CLIP, GATE_CLIP)
    gates = np.empty_like(z)
    gates[:, : 3 * u] = 1.0 / (1.0 + np.exp(-z[:, : 3 * u]))
    gates[:, 3 * u :] = np.tanh(z[:, 3 * u :])
    i = gates[:, :u]
    f = gates[:, u : 2 * u]
    o = gates[:, 2 * u : 3 * u]
    g = gates[:, 3 * u :]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return gates, c, h


@njit
def _lstm_pointwise_numba(pre, c_prev):
    n, u = c_prev.shape
    gates = np.empty_like(pre)
    c = np.empty_like(c_prev)
    h = np.empty_like(c_prev)
    for r in range(n):
        for k in range(4 * u):
            z = min(max(pre[r, k], -GATE_CLIP), GATE_CLIP)
            if k < 3 * u:
                gates[r, k] = 1.0 / (1.0 + math.exp(-z))
            else:
                gates[r, k] = math.tanh(z)
        for j in range(u):
            cj = gates[r, u + j] * c_prev[r, j] + gates[r, j] * gates[r, 3 * u + j]
            c[r, j] = cj
            h[r, j] = gates[r, 2 * u + j] * math.tanh(cj)
    return gates, c, h


def _lstm_pointwise_backward_numpy(pre, gates, c_prev, c, dh, dc):
    """Returns (d pre-activation, d c_prev) given upstream dh, dc."""
    u = c_prev.shape[1]
    i = gates[:, :u]
    f = gates[:, u : 2 * u]
    o = gates[:, 2 * u : 3 * u]
    g = gates[:, 3 * u :]
    tc = np.tanh(c)
    dc_total = dc + dh * o * (1.0 - tc * tc)
    dpre = np.empty_like(pre)
    dpre[:, :u] = dc_total * g * i * (1.0 - i)
    dpre[:, u : 2 * u] = dc_total * c_prev * f * (1.0 - f)
    dpre[:, 2 * u : 3 * u] = dh * tc * o * (1.0 - o)
    dpre[:, 3 * u :] = dc_total * i * (1.0 - g * g)
    dpre[np.abs(pre) >= GATE_CLIP] = 0.0
    return dpre, dc_total * f


@njit
def _lstm_pointwise_backward_numba(pre, gates, c_prev, c, dh, dc):
    n, u = c_prev.shape
    dpre = np.empty_like(pre)
    dc_prev = np.empty_like(c_prev)
    for r in range(n):
        for j in range(u):
            i = gates[r, j]
            f = gates[r, u + j]
            o = gates[r, 2 * u + j]
            g = gates[r, 3 * u + j]
            tc = math.tanh(c[r, j])
            dct = dc[r, j] + dh[r, j] * o * (1.0 - tc * tc)
            dpre[r, j] = dct * g * i * (1.0 - i)
            dpre[r, u + j] = dct * c_prev[r, j] * f * (1.0 - f)
            dpre[r, 2 * u + j] = dh[r, j] * tc * o * (1.0 - o)
            dpre[r, 3 * u + j] = dct * i * (1.0 - g * g)
            dc_prev[r, j] = dct * f
        for k in range(4 * u):
            if abs(pre[r, k]) >= GATE_CLIP:
                dpre[r, k] = 0.0
    return dpre, dc_prev


# ---------------------------------------------------------------------------
# Pinhole projection of a batch of point sets, one camera per batch row.


def _project_numpy(rot, pos, pts, focal):
    cam = np.einsum("bij,bpj->bpi", rot, pts - pos[:, None, :])
    depth = cam[..., 2]
    min_depth = depth.min() if depth.size else np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = focal * cam[..., :2] / depth[..., None]
    return uv, min_depth


@njit
def _project_numba(rot, pos, pts, focal):
    b, p, _ = pts.shape
    uv = np.empty((b, p, 2))
    min_depth = np.inf
    for r in range(b):
        for k in range(p):
            d0 = pts[r, k, 0] - pos[r, 0]
            d1 = pts[r, k, 1] - pos[r, 1]
            d2 = pts[r, k, 2] - pos[r, 2]
            x = rot[r, 0, 0] * d0 + rot[r, 0, 1] * d1 + rot[r, 0, 2] * d2
            y = rot[r, 1, 0] * d0 + rot[r, 1, 1] * d1 + rot[r, 1, 2] * d2
            z = rot[r, 2, 0] * d0 + rot[r, 2, 1] * d1 + rot[r, 2, 2] * d2
            if z < min_depth:
                min_depth = z
            uv[r, k, 0] = focal * x / z
            uv[r, k, 1] = focal * y / z
    return uv, min_depth


# ---------------------------------------------------------------------------
# Constant-velocity point dynamics with workspace clamp.


def _step_numpy(x, a, v, lo, hi):
    norm = np.sqrt(np.sum(a * a, axis=1))
    moving = norm > 1e-8
    scale = np.where(moving, v / np.where(moving, norm, 1.0), 0.0)
    return np.clip(x + a * scale[:, None], lo, hi)


@njit
def _step_numba(x, a, v, lo, hi):
    n = x.shape[0]
    out = np.empty_like(x)
    for r in range(n):
        norm = math.sqrt(a[r, 0] * a[r, 0] + a[r, 1] * a[r, 1] + a[r, 2] * a[r, 2])
        s = v / norm if norm > 1e-8 else 0.0
        for j in range(3):
            out[r, j] = min(max(x[r, j] + a[r, j] * s, lo[j]), hi[j])
    return out


# ---------------------------------------------------------------------------
# Discounted sum along the last axis: sum_j gamma**j * r[..., j].


def _discounted_sum_numpy(rewards, gamma):
    powers = gamma ** np.arange(rewards.shape[1], dtype=np.float64)
    return rewards @ powers


@njit
def _discounted_sum_numba(rewards, gamma):
    n, m = rewards.shape
    out = np.zeros(n)
    for r in range(n):
        acc = 0.0
        for j in range(m - 1, -1, -1):
            acc = rewards[r, j] + gamma * acc
        out[r] = acc
    return out


# Under the numba backend the LSTM forward stays on numpy: without SVML numba
# calls scalar libm exp/tanh. discounted_sum keeps the numba recurrence even
# though the BLAS dot is a few microseconds faster; it runs once per MC batch
# and swapping it would move recorded Q targets by an ulp.
if USE_NUMBA:
    lstm_pointwise = _lstm_pointwise_numpy
    lstm_pointwise_backward = _lstm_pointwise_backward_numba
    project_batch = _project_numba
    step_batch = _step_numba
    discounted_sum = _discounted_sum_numba
else:
    lstm_pointwise = _lstm_pointwise_numpy
    lstm_pointwise_backward = _lstm_pointwise_backward_numpy
    project_batch = _project_numpy
    step_batch = _step_numpy
    discounted_sum = _discounted_sum_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
