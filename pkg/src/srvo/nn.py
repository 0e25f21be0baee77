"""Dense / LSTM kernels with reverse-mode gradients, Adam, and checkpoints.

The autodiff is a plain tape: every op appends a node holding its value and
a closure that pushes the upstream gradient into its parents. Values are
float64 numpy arrays with a leading batch axis.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from srvo import kernels

IDENTITY = "identity"
RELU = "relu"
TANH = "tanh"
ACTIVATIONS = (IDENTITY, RELU, TANH)

CHECKPOINT_MAGIC = b"SRVO"
CHECKPOINT_VERSION = 1
ADAM_PREFIX = "__adam__/"
CONFIG_RECORD = "__config__"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Named float64 arrays, iterated in lexicographic name order."""

    def __init__(self, arrays=None):
        self._data = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._data:
            raise KeyError(f"duplicate parameter {name!r}")
        self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name):
        return self._data[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if name not in self._data:
            raise KeyError(f"unknown parameter {name!r}; use add()")
        if value.shape != self._data[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._data[name].shape}")
        self._data[name] = value

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(sorted(self._data))

    def __len__(self):
        return len(self._data)

    def names(self):
        return sorted(self._data)

    def items(self):
        return [(n, self._data[n]) for n in self.names()]

    def copy(self):
        return ParamStore({n: v.copy() for n, v in self.items()})

    @property
    def size(self):
        return sum(v.size for v in self._data.values())

    def digest(self):
        h = hashlib.sha256()
        for name, v in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def flat(self):
        return np.concatenate([v.ravel() for _, v in self.items()]) if self._data else np.zeros(0)


# ---------------------------------------------------------------------------
# Plain forward kernels


def _activate(z, activation):
    if activation == RELU:
        return np.maximum(z, 0.0)
    if activation == TANH:
        return np.tanh(z)
    if activation == IDENTITY:
        return z
    raise ValueError(f"unknown activation {activation!r}")


def dense(W, b, x, activation=IDENTITY):
    """activation(W x + b) for x of shape (..., n)."""
    W = np.asarray(W)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or np.shape(b) != (W.shape[0],):
        raise ShapeError(f"dense: W{W.shape}, b{np.shape(b)}, x{x.shape}")
    return _activate(x @ W.T + b, activation)


def lstm_cell(W, U, b, x, state):
    """One LSTM step. Gates are laid out [i, f, o, g]; returns (h', (h', c'))."""
    h, c = state
    x = np.atleast_2d(x)
    h2 = np.atleast_2d(h)
    c2 = np.atleast_2d(c)
    u = U.shape[1]
    if W.shape != (4 * u, x.shape[1]) or U.shape != (4 * u, u) or b.shape != (4 * u,) or h2.shape[1] != u or c2.shape != h2.shape:
        raise ShapeError(f"lstm_cell: W{W.shape} U{U.shape} b{b.shape} x{x.shape} h{h2.shape} c{c2.shape}")
    pre = x @ W.T + h2 @ U.T + b
    _, c_new, h_new = kernels.lstm_pointwise(pre, np.ascontiguousarray(c2))
    if np.ndim(h) == 1:
        h_new, c_new = h_new[0], c_new[0]
    return h_new, (h_new, c_new)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """(-log softmax(logits)[label], d loss / d logits) for one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    z = logits - logits.max()
    logz = math.log(np.exp(z).sum())
    grad = np.exp(z - logz)
    loss = logz - z[label]
    grad[label] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# Tape


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "needs_grad")

    def __init__(self, value, parents=(), backward_fn=None, name=None, needs_grad=True):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


def _acc(var, g):
    if not var.needs_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=np.float64)
    else:
        var.grad += g


class Tape:
    """Records ops for a reverse pass. ``Tape(record=False)`` only evaluates."""

    def __init__(self, record=True):
        self.record = record
        self.nodes = []
        self.leaves = {}

    def _node(self, value, parents, backward_fn):
        needs = self.record and any(p.needs_grad for p in parents)
        v = Var(value, parents if needs else (), backward_fn if needs else None, needs_grad=needs)
        if needs:
            self.nodes.append(v)
        return v

    def param(self, name, value):
        if name not in self.leaves:
            self.leaves[name] = Var(value, name=name, needs_grad=self.record)
        return self.leaves[name]

    def params(self, store, prefix=""):
        return {n: self.param(n, v) for n, v in store.items() if n.startswith(prefix)}

    @staticmethod
    def const(value):
        return Var(np.asarray(value, dtype=np.float64), needs_grad=False)

    # -- ops ---------------------------------------------------------------

    def dense(self, x, W, b, activation=IDENTITY):
        xv = x.value
        if xv.shape[-1] != W.value.shape[1]:
            raise ShapeError(f"dense: W{W.value.shape} x{xv.shape}")
        z = xv @ W.value.T + b.value
        y = _activate(z, activation)

        def back(g):
            if activation == RELU:
                g = g * (z > 0)
            elif activation == TANH:
                g = g * (1.0 - y * y)
            g2 = g.reshape(-1, g.shape[-1])
            _acc(W, g2.T @ xv.reshape(-1, xv.shape[-1]))
            _acc(b, g2.sum(axis=0))
            _acc(x, g @ W.value)

        return self._node(y, (x, W, b), back)

    def lstm(self, x, h, c, W, U, b):
        """Returns a (B, 2u) node holding [h', c']; split with ``slice``."""
        u = U.value.shape[1]
        pre = x.value @ W.value.T + h.value @ U.value.T + b.value
        c_prev = np.ascontiguousarray(c.value)
        gates, c_new, h_new = kernels.lstm_pointwise(pre, c_prev)

        def back(g):
            dh = np.ascontiguousarray(g[:, :u])
            dc = np.ascontiguousarray(g[:, u:])
            dpre, dc_prev = kernels.lstm_pointwise_backward(pre, gates, c_prev, c_new, dh, dc)
            _acc(W, dpre.T @ x.value)
            _acc(U, dpre.T @ h.value)
            _acc(b, dpre.sum(axis=0))
            _acc(x, dpre @ W.value)
            _acc(h, dpre @ U.value)
            _acc(c, dc_prev)

        return self._node(np.concatenate([h_new, c_new], axis=1), (x, h, c, W, U, b), back)

    def slice(self, x, start, stop):
        def back(g):
            if x.needs_grad:
                full = np.zeros_like(x.value)
                full[..., start:stop] = g
                _acc(x, full)

        return self._node(x.value[..., start:stop], (x,), back)

    def concat(self, xs):
        sizes = [v.value.shape[-1] for v in xs]
        bounds = np.cumsum([0] + sizes)

        def back(g):
            for v, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                _acc(v, g[..., lo:hi])

        return self._node(np.concatenate([v.value for v in xs], axis=-1), tuple(xs), back)

    def reshape(self, x, shape):
        old = x.value.shape

        def back(g):
            _acc(x, g.reshape(old))

        return self._node(x.value.reshape(shape), (x,), back)

    def masked_sum(self, x, mask):
        """x (..., S, F), mask (..., S) constant -> sum over S of mask * x."""

        def back(g):
            _acc(x, g[..., None, :] * mask[..., None])

        return self._node(np.einsum("...sf,...s->...f", x.value, mask), (x,), back)

    def attend(self, x, z, mask):
        """Softmax(z) over the present slots, then the weighted sum of x.

        x (..., S, F), z (..., S), mask (..., S) constant with at least one 1 per row.
        """
        on = mask > 0
        zmax = np.where(on, z.value, -np.inf).max(axis=-1, keepdims=True)
        alpha = np.exp(np.where(on, z.value - np.where(np.isfinite(zmax), zmax, 0.0), -np.inf))
        alpha = alpha / np.maximum(alpha.sum(axis=-1, keepdims=True), 1e-300)

        def back(g):
            _acc(x, alpha[..., None] * g[..., None, :])
            if z.needs_grad:
                da = np.einsum("...sf,...f->...s", x.value, g)
                _acc(z, alpha * (da - (alpha * da).sum(axis=-1, keepdims=True)))

        return self._node(np.einsum("...sf,...s->...f", x.value, alpha), (x, z), back)

    def cell_logits(self, z, cells, mask, n_cells, fill):
        """Scatter slot scores z (..., S) into n_cells logits.

        A cell holding several present slots gets the log-sum-exp of their
        scores; cells with none get the constant ``fill``.
        """
        cells = np.asarray(cells)
        onehot = (cells[..., None] == np.arange(n_cells)) & (mask[..., None] > 0)  # (..., S, C)
        occupied = onehot.any(axis=-2)
        on = mask > 0
        zmax = np.where(on, z.value, -np.inf).max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.exp(np.where(on, z.value - zmax, -np.inf))
        tot = np.einsum("...s,...sc->...c", e, onehot.astype(np.float64))
        out = np.where(occupied, np.log(np.where(occupied, tot, 1.0)) + zmax, fill)

        def back(g):
            share = e[..., None] * onehot / np.where(occupied, tot, 1.0)[..., None, :]
            _acc(z, np.einsum("...sc,...c->...s", share, g))

        return self._node(out, (z,), back)

    def index(self, x, k, axis=1):
        """x.take(k, axis)."""

        def back(g):
            full = np.zeros_like(x.value)
            idx = [slice(None)] * x.value.ndim
            idx[axis] = k
            full[tuple(idx)] = g
            _acc(x, full)

        return self._node(np.take(x.value, k, axis=axis), (x,), back)

    def sum(self, x):
        def back(g):
            _acc(x, np.broadcast_to(g, x.value.shape))

        return self._node(np.asarray(x.value.sum()), (x,), back)

    def stack(self, xs, axis=1):
        def back(g):
            for k, v in enumerate(xs):
                _acc(v, np.take(g, k, axis=axis))

        return self._node(np.stack([v.value for v in xs], axis=axis), tuple(xs), back)

    def sq_error(self, pred, target, weight=None):
        """sum over rows of weight * ||pred - target||^2 (target, weight constant)."""
        diff = pred.value - target
        per = (diff * diff).sum(axis=-1)
        w = np.ones_like(per) if weight is None else weight

        def back(g):
            _acc(pred, (2.0 * g) * w[..., None] * diff)

        return self._node(np.asarray((w * per).sum()), (pred,), back)

    def softmax_xent(self, logits, labels, weight=None):
        """sum over rows of weight * cross-entropy(logits_row, label_row)."""
        z = logits.value
        flat = z.reshape(-1, z.shape[-1])
        lab = np.asarray(labels).reshape(-1)
        w = np.ones(len(lab)) if weight is None else np.asarray(weight, dtype=np.float64).reshape(-1)
        if lab.size and (lab.min() < 0 or lab.max() >= flat.shape[1]):
            raise ValueError("label out of range")
        p = softmax(flat)
        m = flat.max(axis=1, keepdims=True)
        logz = (m + np.log(np.exp(flat - m).sum(axis=1, keepdims=True)))[:, 0]
        rows = np.arange(len(lab))
        loss = (w * (logz - flat[rows, lab])).sum()

        def back(g):
            d = p.copy()
            d[rows, lab] -= 1.0
            _acc(logits, (g * w[:, None] * d).reshape(z.shape))

        return self._node(np.asarray(loss), (logits,), back)

    def weighted_sum(self, terms):
        """sum of w * x over (w, x) pairs of scalar nodes."""
        terms = [(float(w), v) for w, v in terms]

        def back(g):
            for w, v in terms:
                _acc(v, w * g)

        return self._node(np.asarray(sum(w * v.value for w, v in terms)), tuple(v for _, v in terms), back)

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss, names=None):
        """Gradients of scalar ``loss`` w.r.t. every registered parameter."""
        if not np.all(np.isfinite(loss.value)):
            raise NumericError(f"non-finite loss {loss.value}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        wanted = names if names is not None else sorted(self.leaves)
        grads = {}
        for n in wanted:
            leaf = self.leaves.get(n)
            grads[n] = np.zeros_like(leaf.value) if leaf is None or leaf.grad is None else leaf.grad
        return grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.98
    decay_steps: int = 1000
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self):
        return self.lr * self.decay ** (self.t // self.decay_steps)


def adam_step(params, grads, opt):
    """In-place Adam update of every parameter named in ``grads``."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}")
    lr = opt.current_lr()
    opt.t += 1
    c1 = 1.0 - opt.beta1**opt.t
    c2 = 1.0 - opt.beta2**opt.t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# Finite-difference checking


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_noise_floor(loss, h=1e-5, factor=1e5):
    """Relative-error floor for central differences.

    Roundoff in (f(x+h) - f(x-h)) / 2h is a few ulps of f over h. With the
    default factor and a 1e-4 threshold, coordinates are allowed 10 ulps of
    |f| / h of absolute error; larger gradients still meet the relative test.
    """
    return max(1e-6, factor * np.finfo(np.float64).eps * abs(float(loss)) / h)


def grad_check(fn, params, h=1e-5, max_coords=200, seed=0, floor=1e-6, return_details=False, loss_fn=None, per_tensor=None):
    """Max relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(loss, grads)``; ``loss_fn(params)``, when
    given, is used for the perturbed evaluations. Every coordinate is checked
    when the model has at most 1000 parameters. Otherwise a random subsample:
    ``per_tensor`` coordinates from each tensor if set, else ``max_coords``
    drawn over the whole model.
    """
    _, grads = fn(params)
    loss_fn = loss_fn or (lambda p: fn(p)[0])
    rng = np.random.default_rng(seed)
    coords = [(n, i) for n, v in params.items() for i in range(v.size)]
    if len(coords) > 1000 and per_tensor:
        coords = []
        for n, v in params.items():
            pick = rng.choice(v.size, size=min(per_tensor, v.size), replace=False)
            coords += [(n, int(i)) for i in sorted(pick)]
    elif len(coords) > 1000:
        pick = rng.choice(len(coords), size=min(max_coords, len(coords)), replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    details = []
    for name, i in coords:
        arr = params[name]
        flat = arr.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(params))
        flat[i] = orig - h
        fm = float(loss_fn(params))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(np.asarray(grads[name]).reshape(-1)[i])
        err = float(relative_error(analytic, numeric, floor))
        worst = max(worst, err)
        details.append((name, i, analytic, numeric, err))
    return (worst, details) if return_details else worst


# ---------------------------------------------------------------------------
# Checkpoints


def _write_record(fh, name, arr):
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def save_checkpoint(path, params, opt=None, config=None):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in params.items():
            _write_record(fh, name, arr)
        if opt is not None:
            hyper = [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.decay, opt.decay_steps, opt.t]
            _write_record(fh, ADAM_PREFIX + "hyper", np.array(hyper, dtype=np.float64))
            for name in sorted(opt.m):
                _write_record(fh, ADAM_PREFIX + "m/" + name, opt.m[name])
                _write_record(fh, ADAM_PREFIX + "v/" + name, opt.v[name])
        if config is not None:
            blob = json.dumps(config, sort_keys=True).encode("utf-8")
            _write_record(fh, CONFIG_RECORD, np.frombuffer(blob, dtype=np.uint8).astype(np.float64))


def load_checkpoint(path):
    """Returns (params, opt or None, config or None)."""
    records = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated checkpoint")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
            records[name] = data.reshape(dims)
    params = ParamStore({n: v for n, v in records.items() if not n.startswith("__")})
    opt = None
    hyper = records.get(ADAM_PREFIX + "hyper")
    if hyper is not None:
        lr, b1, b2, eps, decay, decay_steps, t = hyper.tolist()
        opt = AdamState(lr, b1, b2, eps, decay, int(decay_steps), int(t))
        mp = ADAM_PREFIX + "m/"
        for n, v in records.items():
            if n.startswith(mp):
                key = n[len(mp) :]
                opt.m[key] = v.copy()
                opt.v[key] = records[ADAM_PREFIX + "v/" + key].copy()
    config = None
    if CONFIG_RECORD in records:
        config = json.loads(records[CONFIG_RECORD].astype(np.uint8).tobytes().decode("utf-8"))
    return params, opt, config


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
