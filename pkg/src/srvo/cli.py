"""Command-line entry point: gen, train, dagger, adapt, eval, verify.

Exit codes: 0 ok, 2 usage or I/O, 3 numeric divergence, 4 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from srvo import config as cfgmod
from srvo import control as ct
from srvo import nn
from srvo import policy as pl
from srvo import scene as sc
from srvo import training as tr

log = logging.getLogger("srvo")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _provenance(cfg, command, **extra):
    out = {"command": command, "config": cfgmod.to_dict(cfg), "seed": cfg.seed}
    out.update(extra)
    return out


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _checkpoint_path(cfg, variant, stage):
    return str(Path(cfg.paths.checkpoints) / f"{variant}_{stage}.ckpt")


def _save_checkpoint(path, params, opt, meta):
    """Checkpoint with the parameter digest embedded so ``verify`` can check it."""
    meta = dict(meta, params_digest=params.digest())
    _ensure_parent(path)
    nn.save_checkpoint(path, params, opt, meta)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"no such checkpoint: {path}")
    return nn.load_checkpoint(path)


def _load_dataset(path):
    if not Path(path).exists():
        raise UsageError(f"no such dataset: {path}")
    return tr.load_dataset(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(cfg, out=None):
    out = out or cfg.paths.dataset
    t0 = time.time()
    traj = tr.generate_demonstrations(
        cfg.data.n_episodes,
        cfg.train.demo_noise,
        seed=cfg.seed,
        env=cfg.env,
        T=cfg.train.horizon,
        random_prefix=cfg.train.random_prefix,
        n_objects=cfg.data.n_objects,
    )
    digest = tr.dataset_digest(traj)
    _ensure_parent(out)
    tr.save_dataset(out, traj, _provenance(cfg, "gen", source=traj.source, content_digest=digest))
    size = os.path.getsize(out)
    print(f"episodes={len(traj)} bytes={size} sha256={_sha256(out)} ({time.time() - t0:.1f}s)")
    return out


def cmd_train(cfg, dataset=None, variant=pl.RECURRENT, out=None, resume=None, steps=None):
    traj, _ = _load_dataset(dataset or cfg.paths.dataset)
    out = out or _checkpoint_path(cfg, variant, "base")
    if resume:
        params, opt, _ = _load_checkpoint(resume)
        if pl.variant_of(params) != variant:
            raise UsageError(f"{resume} holds a {pl.variant_of(params)} model, not {variant}")
    else:
        params, opt = pl.init_params(variant, cfg.seed, cfg.model), None
    meta = _provenance(cfg, "train", variant=variant, dataset_digest=tr.dataset_digest(traj))
    _ensure_parent(out)
    t0 = time.time()
    params, opt, curves = tr.train(params, traj, cfg.train, steps=steps, opt=opt, seed=cfg.seed, checkpoint_path=out, config=meta)
    _save_checkpoint(out, params, opt, meta)
    curves_path = str(Path(out).with_suffix(".curves.csv"))
    curves.write_csv(curves_path)
    last = curves.rows[-1] if curves.rows else None
    msg = f" final total loss {last[4]:.4f}" if last else ""
    print(f"trained {variant} for {len(curves.rows)} steps in {time.time() - t0:.1f}s{msg}; wrote {out}")
    return out


def _iter_path(out, k):
    p = Path(out)
    return str(p.with_name(f"{p.stem}_iter{k}{p.suffix}"))


def cmd_dagger(cfg, checkpoint, dataset=None, iters=2, out=None, steps=None):
    params, opt, meta_in = _load_checkpoint(checkpoint)
    traj, _ = _load_dataset(dataset or cfg.paths.dataset)
    variant = pl.variant_of(params)
    out = out or _checkpoint_path(cfg, variant, "dagger")
    buf = tr.EpisodeBuffer(cfg.train.buffer_capacity)
    buf.add(traj)
    steps = cfg.train.dagger_steps if steps is None else steps
    for it in range(iters):
        t0 = time.time()
        tr.dagger_iteration(params, cfg.train.dagger_episodes, cfg.seed * 1000 + it + 1, buf, cfg.train, cfg.env)
        params, opt, _ = tr.train(params, buf.data, cfg.train, steps=steps, opt=opt, seed=cfg.seed * 1000 + it + 1)
        meta = _provenance(cfg, "dagger", variant=variant, iterations=it + 1, parent=meta_in.get("params_digest"))
        if it + 1 < iters:
            _save_checkpoint(_iter_path(out, it + 1), params, opt, meta)
        print(f"dagger iteration {it + 1}/{iters}: buffer {len(buf)} episodes, {time.time() - t0:.1f}s")
    if iters == 0:
        meta = _provenance(cfg, "dagger", variant=variant, iterations=0, parent=meta_in.get("params_digest"))
    _save_checkpoint(out, params, opt, meta)
    print(f"wrote {out}")
    return out


def cmd_adapt(cfg, checkpoint, out=None):
    params, opt, meta_in = _load_checkpoint(checkpoint)
    out = out or str(Path(checkpoint).with_name(Path(checkpoint).stem + "_adapted.ckpt"))
    shift = sc.default_shift()
    # a one-object scene is trivially localized and gives no gradient
    labeled = tr.make_localization_set(cfg.adapt.n_labels, cfg.seed, shift, cfg.env, sc.Domain.UNSEEN, n_objects=(2, 3))
    adapted = tr.adapt_encoder(params, labeled, cfg.adapt.steps, cfg.adapt.lr, cfg.adapt.batch_size, cfg.seed)
    frozen = [n for n in params.names() if not n.startswith(pl.ENCODER_PREFIXES)]
    identical = [n for n in frozen if adapted[n].tobytes() == params[n].tobytes()]
    print(f"frozen tensors bit-identical: {len(identical)}/{len(frozen)}")
    if len(identical) != len(frozen):
        raise VerificationError("adaptation modified non-encoder tensors: " + ", ".join(sorted(set(frozen) - set(identical))))
    meta = _provenance(cfg, "adapt", variant=pl.variant_of(params), parent=meta_in.get("params_digest"), n_labels=cfg.adapt.n_labels)
    _save_checkpoint(out, adapted, opt, meta)
    print(f"wrote {out}")
    return out


def _parse_named(spec):
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def cmd_eval(cfg, checkpoints, selectors=("greedy",), threads=1, out=None, shifted=False, svg=False, include_random=False):
    variants = {}
    digests = {}
    for spec in checkpoints:
        name, path = _parse_named(spec)
        params, _, meta = _load_checkpoint(path)
        variants[name] = params
        digests[name] = params.digest()
    selectors = tuple(ct.Selector(s) for s in selectors)
    out = out or str(Path(cfg.paths.reports) / "report.csv")
    report = ct.run_benchmark(
        variants,
        conditions=cfg.eval.conditions,
        n_objects=cfg.eval.n_objects,
        selectors=selectors,
        n_trials=cfg.eval.n_trials,
        seed=cfg.seed,
        threads=threads,
        cfg=cfg.eval.cem,
        env=cfg.env,
        shift=sc.default_shift() if shifted else None,
        T=cfg.train.horizon,
        chunk=cfg.eval.chunk,
        metadata={"config": cfgmod.to_dict(cfg), "checkpoints": digests},
    )
    if include_random:
        extra = ct.run_benchmark({"random": None}, cfg.eval.conditions, cfg.eval.n_objects, (ct.Selector.RANDOM,), cfg.eval.n_trials, cfg.seed, threads, cfg.eval.cem, cfg.env, None, cfg.train.horizon, cfg.eval.chunk)
        report.rows.extend(extra.rows)
    _ensure_parent(out)
    report.write_csv(out)
    report.write_distances(str(Path(out).with_suffix(".distances.csv")))
    if svg:
        report.write_svgs(str(Path(out).with_suffix("")))
    for r in report.rows:
        print(f"{r.variant:>12} {r.selector:>6} {r.n_objects} {r.condition:<18} mean {r.mean_dist:.4f} median {r.median_dist:.4f} success {r.success_rate:.3f}")
    print(f"wrote {out} sha256={_sha256(out)}")
    return report


# ---------------------------------------------------------------------------
# verify


def _check_gradients():
    widths = pl.Widths(obs=8, query=6, action=6, core=6, head=8)
    params = pl.init_params(pl.RECURRENT, 1, widths)
    eps = sc.sample_episode_batch(np.array([1, 2]), np.array([2, 3]), sc.Domain.SEEN, sc.Pool.TRAIN)
    traj = pl.rollout(params, eps, 3, pl.source_selector(pl.ActionSource.POLICY, eps, 3, 0.3))
    traj.qtargets = np.array([[0.2, 0.5, 1.0], [0.0, 0.0, 0.9]])
    err = nn.grad_check(lambda p: _combined(p, traj), params, h=1e-5, max_coords=300)
    return err < 1e-4, f"max relative error {err:.2e}"


def _combined(params, traj):
    parts, grads = tr.combined_loss(params, traj)
    return parts.total, grads


def _check_mc_oracle():
    params = pl.init_params(pl.RECURRENT, 2)
    eps = sc.sample_episode_batch(np.arange(4), 2, sc.Domain.SEEN, sc.Pool.TRAIN)
    traj = pl.rollout(None, eps, 6, pl.source_selector(pl.ActionSource.EXPERT, eps, 6))
    worst = 0.0
    for gamma in (0.0, 0.5, 0.9):
        q = tr.mc_q_targets(params, traj, gamma, 1, sigma=0.0)
        for i in range(len(traj)):
            for t in range(traj.T):
                cont = pl.rollout(
                    params,
                    eps.take([i]),
                    traj.T - 1 - t,
                    None,
                    arm0=traj.arm[[i], t + 1],
                    state0=_state_after(params, traj, i, t),
                    prev0=traj.actions[[i], t],
                ) if t < traj.T - 1 else None
                ref = traj.rewards[i, t] + (sum(gamma ** (j + 1) * r for j, r in enumerate(cont.rewards[0])) if cont else 0.0)
                worst = max(worst, abs(ref - q[i, t]))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def _state_after(params, traj, i, t):
    state = pl.RecurrentState.zeros(1, params["core/lstm/U"].shape[1])
    prev = traj.prev_actions()
    for k in range(t + 1):
        _, state = pl.policy_forward(params, traj.obs[[i], k], prev[[i], k], traj.episodes.query[[i]], state)
    return state


def _check_cem():
    target = np.array([0.1, -0.3, 0.2])
    out = pl.PolicyOutput(np.zeros(3), np.zeros(4), np.zeros(64))
    for seed in range(20):
        a, cands, scores = ct.select_action_cem(None, out, ct.CemConfig(top_k=1), seed, q_fn=lambda c: -((c - target) ** 2).sum(-1), return_details=True)
        if not np.array_equal(a, cands[int(np.argmax(scores))]):
            return False, f"seed {seed}: selection is not the argmax"
    return True, "argmax over 20 seeds"


def _check_determinism():
    a = tr.dataset_digest(tr.generate_demonstrations(20, 0.1, seed=5))
    b = tr.dataset_digest(tr.generate_demonstrations(20, 0.1, seed=5))
    params = pl.init_params(pl.RECURRENT, 3)
    kw = dict(conditions=[ct.Condition.NOVEL_VP_UNSEEN_T], n_objects=(2,), selectors=("greedy", "cem"), n_trials=8, seed=4, chunk=4)
    r1 = ct.run_benchmark({"r": params}, threads=1, **kw).to_csv()
    r2 = ct.run_benchmark({"r": params}, threads=2, **kw).to_csv()
    return a == b and r1 == r2, "datasets and reports byte-identical"


def _check_artifact(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == nn.CHECKPOINT_MAGIC:
        params, _, meta = nn.load_checkpoint(path)
        want = meta.get("params_digest")
        if want is None:
            return False, "checkpoint declares no digest"
        return params.digest() == want, f"params digest {'matches' if params.digest() == want else 'differs'}"
    if magic == tr.DATASET_MAGIC:
        traj, meta = tr.load_dataset(path)
        want = meta.get("content_digest")
        got = tr.dataset_digest(traj)
        return got == want, f"dataset digest {'matches' if got == want else 'differs'}"
    return False, "unrecognized artifact"


def cmd_verify(cfg, artifacts=()):
    checks = [
        ("gradient-check", _check_gradients),
        ("mc-oracle", _check_mc_oracle),
        ("cem-argmax", _check_cem),
        ("determinism", _check_determinism),
    ]
    for a in artifacts:
        checks.append((f"artifact:{a}", lambda a=a: _check_artifact(a)))
    failed = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a corrupt artifact must fail the check, not crash
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    if failed:
        raise VerificationError("failed checks: " + ", ".join(failed))
    return True


# ---------------------------------------------------------------------------
# argparse


def build_parser():
    p = argparse.ArgumentParser(prog="srvo", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides config and SRVO_SEED)")
    p.add_argument("--quiet", action="store_true", help="do not print the resolved config")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize demonstrations")
    g.add_argument("--out")
    g.add_argument("--episodes", type=int)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--dataset")
    t.add_argument("--variant", choices=[pl.RECURRENT, pl.REACTIVE], default=pl.RECURRENT)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="continue from this checkpoint (optimizer state included)")
    t.add_argument("--out")

    d = sub.add_parser("dagger", help="on-policy data aggregation and retraining")
    d.add_argument("checkpoint")
    d.add_argument("--dataset")
    d.add_argument("--iters", type=int, default=2)
    d.add_argument("--steps", type=int)
    d.add_argument("--out")

    a = sub.add_parser("adapt", help="encoder-only adaptation to the shifted descriptor domain")
    a.add_argument("checkpoint")
    a.add_argument("--out")

    e = sub.add_parser("eval", help="benchmark checkpoints over the condition matrix")
    e.add_argument("checkpoints", nargs="+", help="PATH or NAME=PATH")
    e.add_argument("--selector", action="append", choices=[s.value for s in ct.Selector], help="repeatable; default greedy")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--trials", type=int)
    e.add_argument("--shifted", action="store_true", help="evaluate under the shifted descriptor domain")
    e.add_argument("--random-baseline", action="store_true")
    e.add_argument("--svg", action="store_true")
    e.add_argument("--out")

    v = sub.add_parser("verify", help="gradient, oracle and determinism checks; optional artifact hashes")
    v.add_argument("artifacts", nargs="*")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed}
    if args.command == "gen":
        overrides["data.n_episodes"] = args.episodes
    if args.command == "eval":
        overrides["eval.n_trials"] = args.trials
    try:
        cfg = cfgmod.load(args.config, overrides)
    except (OSError, cfgmod.ConfigError) as exc:
        print(f"srvo: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        print("config " + cfgmod.dumps(cfg))
    try:
        if args.command == "gen":
            cmd_gen(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.variant, args.out, args.resume, args.steps)
        elif args.command == "dagger":
            cmd_dagger(cfg, args.checkpoint, args.dataset, args.iters, args.out, args.steps)
        elif args.command == "adapt":
            cmd_adapt(cfg, args.checkpoint, args.out)
        elif args.command == "eval":
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            cmd_eval(cfg, args.checkpoints, args.selector or ["greedy"], args.threads, args.out, args.shifted, args.svg, args.random_baseline)
        elif args.command == "verify":
            cmd_verify(cfg, args.artifacts)
    except (tr.DivergenceError, nn.NumericError) as exc:
        print(f"srvo: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VerificationError as exc:
        print(f"srvo: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (UsageError, OSError, ValueError) as exc:
        print(f"srvo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
