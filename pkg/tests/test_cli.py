import json

import pytest

from srvo import cli, config as cfgmod, nn, training as tr


def _cfg(tmp_path, **extra):
    data = {
        "seed": 1,
        "data": {"n_episodes": 12},
        "train": {"steps": 4, "dagger_steps": 2, "dagger_episodes": 4, "batch_size": 4, "mc_unrolls": 1, "checkpoint_every": 2},
        "eval": {"n_trials": 6, "n_objects": [2], "conditions": ["NOVEL_VP_UNSEEN_T"], "chunk": 4},
        "adapt": {"steps": 3},
        "paths": {"dataset": str(tmp_path / "d.srvd"), "checkpoints": str(tmp_path / "ck"), "reports": str(tmp_path / "rep")},
    }
    for k, v in extra.items():
        data[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_config_defaults():
    cfg = cfgmod.load(environ={})
    assert cfg.data.n_episodes == 5000
    assert cfg.adapt.n_labels == 76
    assert cfg.eval.n_trials == 300
    assert cfg.train.gamma == 0.9 and cfg.train.mc_unrolls == 5
    assert cfgmod.from_dict(cfgmod.to_dict(cfg)) == cfg


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="bogus"):
        cfgmod.from_dict({"train": {"bogus": 1}})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.from_dict({"nope": 1})
    assert cli.main(["--config", _cfg(tmp_path, extra_block={}), "verify"]) == cli.EXIT_USAGE


def test_config_invalid_values():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.from_dict({"train": {"gamma": 1.5}})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.from_dict({"eval": {"cem": {"top_k": 0}}})


def test_seed_precedence(tmp_path):
    path = _cfg(tmp_path)
    assert cfgmod.load(path, environ={}).seed == 1
    assert cfgmod.load(path, environ={"SRVO_SEED": "7"}).seed == 7
    assert cfgmod.load(path, {"seed": 9}, environ={"SRVO_SEED": "7"}).seed == 9


def test_gen_idempotent(tmp_path, capsys):
    path = _cfg(tmp_path)
    a, b = tmp_path / "a.srvd", tmp_path / "b.srvd"
    assert cli.main(["--config", path, "gen", "--out", str(a)]) == 0
    assert cli.main(["--config", path, "gen", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "episodes=12" in out and "sha256=" in out
    traj, meta = tr.load_dataset(a)
    assert meta["config"]["seed"] == 1 and meta["command"] == "gen"


def test_gen_bad_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["--config", _cfg(tmp_path), "gen", "--out", str(blocker / "sub" / "d.srvd")]) == cli.EXIT_USAGE


def test_missing_inputs(tmp_path):
    path = _cfg(tmp_path)
    assert cli.main(["--config", path, "train", "--dataset", str(tmp_path / "none")]) == cli.EXIT_USAGE
    assert cli.main(["--config", path, "eval", str(tmp_path / "none.ckpt")]) == cli.EXIT_USAGE
    assert cli.main(["--config", str(tmp_path / "missing.json"), "verify"]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--variant", "bogus"])
    assert exc.value.code == 2


def test_pipeline_smoke(tmp_path, capsys):
    path = _cfg(tmp_path)
    assert cli.main(["--config", path, "gen"]) == 0
    ck = tmp_path / "ck"
    for variant in ("recurrent", "reactive"):
        assert cli.main(["--config", path, "train", "--variant", variant]) == 0
        assert (ck / f"{variant}_base.ckpt").exists()
        assert (ck / f"{variant}_base.curves.csv").exists()
    rec = str(ck / "recurrent_base.ckpt")
    assert cli.main(["--config", path, "dagger", rec, "--iters", "1"]) == 0
    assert cli.main(["--config", path, "adapt", str(ck / "recurrent_dagger.ckpt")]) == 0
    assert "frozen tensors bit-identical: " in capsys.readouterr().out
    params, _, meta = nn.load_checkpoint(ck / "recurrent_dagger_adapted.ckpt")
    assert meta["command"] == "adapt" and meta["config"]["adapt"]["n_labels"] == 76
    assert meta["params_digest"] == params.digest()

    args = ["--config", path, "eval", f"rec={rec}", f"ff={ck / 'reactive_base.ckpt'}", "--selector", "greedy", "--selector", "cem"]
    r1, r2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert cli.main(args + ["--out", str(r1)]) == 0
    assert cli.main(args + ["--out", str(r2), "--threads", "3"]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    text = r1.read_text()
    assert '"seed": 1' in text and "rec,cem,2,NOVEL_VP_UNSEEN_T,6" in text

    assert cli.main(["--config", path, "verify", rec, str(tmp_path / "d.srvd")]) == 0


def test_train_resume_matches_uninterrupted(tmp_path):
    path = _cfg(tmp_path)
    assert cli.main(["--config", path, "gen"]) == 0
    full = str(tmp_path / "full.ckpt")
    half = str(tmp_path / "half.ckpt")
    rest = str(tmp_path / "rest.ckpt")
    assert cli.main(["--config", path, "train", "--out", full, "--steps", "4"]) == 0
    assert cli.main(["--config", path, "train", "--out", half, "--steps", "2"]) == 0
    assert cli.main(["--config", path, "train", "--resume", half, "--out", rest, "--steps", "2"]) == 0
    a, _, _ = nn.load_checkpoint(full)
    b, _, _ = nn.load_checkpoint(rest)
    assert a.digest() == b.digest()


def test_verify_detects_corruption(tmp_path, capsys):
    path = _cfg(tmp_path)
    assert cli.main(["--config", path, "gen"]) == 0
    ck = str(tmp_path / "m.ckpt")
    assert cli.main(["--config", path, "train", "--out", ck, "--steps", "1"]) == 0
    data = bytearray(open(ck, "rb").read())
    data[200] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    capsys.readouterr()
    assert cli.main(["--config", path, "verify", str(bad)]) == cli.EXIT_VERIFY
    assert "FAIL artifact:" in capsys.readouterr().out


def test_divergence_exit_code(tmp_path, monkeypatch):
    path = _cfg(tmp_path)
    assert cli.main(["--config", path, "gen"]) == 0

    def boom(*a, **k):
        raise tr.DivergenceError("loss diverged")

    monkeypatch.setattr(tr, "train", boom)
    assert cli.main(["--config", path, "train"]) == cli.EXIT_DIVERGED
