"""Time the numba kernels against their numpy fallbacks, plus one end-to-end
training step and one batched rollout under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 50]

The end-to-end rows spawn a subprocess per backend because the backend is
chosen once at import time (SRVO_NUMBA).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from srvo import kernels


def kernel_cases(rng):
    b, u = 64, 64
    pre = rng.normal(scale=2, size=(b, 4 * u))
    c = rng.normal(size=(b, u))
    gates, c1, _ = kernels._lstm_pointwise_numpy(pre, c)
    dh, dc = rng.normal(size=(b, u)), rng.normal(size=(b, u))
    rot = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(256)])
    pos = rng.normal(size=(256, 3)) * 3 + np.array([0, 0, 5.0])
    pts = rng.normal(size=(256, 4, 3))
    x, a = rng.uniform(-0.5, 0.5, size=(256, 3)), rng.normal(size=(256, 3))
    lo, hi = -0.5 * np.ones(3), 0.5 * np.ones(3)
    r = (rng.uniform(size=(2048, 9)) > 0.7).astype(float)
    return {
        "lstm_pointwise (64x256)": ("_lstm_pointwise", (pre, c)),
        "lstm_pointwise_backward (64x256)": ("_lstm_pointwise_backward", (pre, gates, c, c1, dh, dc)),
        "project (256 cams x 4 pts)": ("_project", (rot, pos, pts, 1.0)),
        "step (256 arms)": ("_step", (x, a, 0.05, lo, hi)),
        "discounted_sum (2048 x 9)": ("_discounted_sum", (r, 0.9)),
    }


END_TO_END = r"""
import json, time, numpy as np
from srvo import kernels, policy as pl, scene as sc, training as tr
d = tr.generate_demonstrations(64, 0.1, seed=0)
p = pl.init_params("recurrent", 0)
tr.combined_loss(p, d.take(np.arange(32)))
eps = sc.sample_episode_batch(np.arange(64), 2, "SEEN", "TRAIN")
pl.rollout(p, eps, 10)
t = time.perf_counter()
for _ in range(REPEAT):
    tr.combined_loss(p, d.take(np.arange(32)))
step = (time.perf_counter() - t) / REPEAT
t = time.perf_counter()
for _ in range(REPEAT):
    pl.rollout(p, eps, 10)
roll = (time.perf_counter() - t) / REPEAT
print(json.dumps({"backend": kernels.BACKEND, "train_step": step, "rollout": roll}))
"""


def end_to_end(flag, repeat):
    env = dict(os.environ, SRVO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", END_TO_END.replace("REPEAT", str(repeat))], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e-repeat", type=int, default=10)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, (stem, inputs) in kernel_cases(rng).items():
        f_np = getattr(kernels, stem + "_numpy")
        f_nb = getattr(kernels, stem + "_numba")
        f_nb(*inputs)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{label:36s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.2f}")
    print()
    rows = [end_to_end("0", args.e2e_repeat), end_to_end("1", args.e2e_repeat)]
    print(f"{'end-to-end':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for key, label in (("train_step", "train step (B=32, T=10)"), ("rollout", "rollout (64 episodes, T=10)")):
        a, b = rows[0][key] * 1e3, rows[1][key] * 1e3
        print(f"{label:36s} {a:10.2f} {b:10.2f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
