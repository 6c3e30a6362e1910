import json

import pytest

from tidespl import cli, datafile


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def scene_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_classes": 3, "trials_per_class": 10, "n_steps": 8, "n_neurons": 6}))
    out = tmp_path / "scene"
    assert run("gen", "--kind", "scene", "--config", spec, "--out", out) == 0
    return out


def write_cfg(tmp_path, **over):
    cfg = {"model": {"n_neurons": 6, "latent_dim": 4, "seq_len": 4, "max_offset": 2},
           "train": {"iterations": 3, "batch_size": 4, "lr": 0.001, "log_interval": 1}, "seed": 2}
    cfg.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_gen_refuses_existing_without_overwrite(scene_dir, tmp_path):
    spec = tmp_path / "spec.json"
    assert run("gen", "--kind", "scene", "--config", spec, "--out", scene_dir) == cli.EXIT_USAGE
    assert run("gen", "--kind", "scene", "--config", spec, "--out", scene_dir, "--overwrite") == 0


def test_gen_is_byte_identical(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_steps": 30, "trials_per_condition": 5, "n_conditions": 2}))
    for d in ("a", "b"):
        assert run("gen", "--kind", "lorenz", "--config", spec, "--out", tmp_path / d) == 0
    for name in ("train.nspk", "test.nspk", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_bad_spec_key(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_stepz": 3}))
    assert run("gen", "--kind", "lorenz", "--config", spec, "--out", tmp_path / "x") == cli.EXIT_USAGE


def test_train_eval_dump(scene_dir, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    run_dir = tmp_path / "run"
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", run_dir) == 0
    for name in ("config.json", "loss_log.jsonl", "final.ckpt", "hashes.json"):
        assert (run_dir / name).exists()
    assert len((run_dir / "loss_log.jsonl").read_text().splitlines()) == 3
    capsys.readouterr()
    report = tmp_path / "m.json"
    assert run("eval", "--checkpoint", run_dir / "final.ckpt", "--data", scene_dir, "--protocol", "scene",
               "--latents", "content", "--markov-order", 2, "--out", report) == 0
    body = json.loads(report.read_text())
    assert body["results"]["scene"]["chosen_k"] % 2 == 1
    assert body["config"]["latents"] == "content"
    assert run("dump-latents", "--checkpoint", run_dir / "final.ckpt", "--data", scene_dir,
               "--out", tmp_path / "lat.nspk") == 0
    assert datafile.read(tmp_path / "lat.nspk").inferred[0].shape == (8, 4)


def test_train_refuses_existing_run(scene_dir, tmp_path):
    cfg = write_cfg(tmp_path)
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == 0
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == cli.EXIT_USAGE


def test_train_zero_iterations_emits_initial_checkpoint(scene_dir, tmp_path):
    cfg = write_cfg(tmp_path, train={"iterations": 0})
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "final.ckpt").exists()
    assert (tmp_path / "r" / "loss_log.jsonl").read_text() == ""


def test_train_dimension_mismatch(scene_dir, tmp_path, capsys):
    cfg = write_cfg(tmp_path, model={"n_neurons": 7})
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == cli.EXIT_USAGE
    assert "n_neurons" in capsys.readouterr().err


def test_unknown_config_key(scene_dir, tmp_path):
    cfg = write_cfg(tmp_path, learning_rate=1)
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == cli.EXIT_USAGE


def test_corrupted_data_exit_code(scene_dir, tmp_path, capsys):
    f = scene_dir / "train.nspk"
    f.write_bytes(b"JUNK" + f.read_bytes()[4:])
    cfg = write_cfg(tmp_path)
    assert run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r") == cli.EXIT_DATA
    assert "offset 0" in capsys.readouterr().err


def test_eval_unknown_protocol(scene_dir, tmp_path):
    cfg = write_cfg(tmp_path, train={"iterations": 0})
    run("train", "--config", cfg, "--data", scene_dir, "--out", tmp_path / "r")
    assert run("eval", "--checkpoint", tmp_path / "r" / "final.ckpt", "--data", scene_dir,
               "--protocol", "bogus") == cli.EXIT_USAGE


def test_eval_seed_aggregation(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_steps": 40, "trials_per_condition": 5, "n_conditions": 2, "n_neurons": 6}))
    run("gen", "--kind", "lorenz", "--config", spec, "--out", tmp_path / "lz")
    for seed in (0, 1):
        cfg = write_cfg(tmp_path, seed=seed, train={"iterations": 1, "batch_size": 2})
        assert run("train", "--config", cfg, "--data", tmp_path / "lz", "--out", tmp_path / f"r{seed}") == 0
    capsys.readouterr()
    assert run("eval", "--checkpoint", str(tmp_path / "r{seed}" / "final.ckpt"), "--data", tmp_path / "lz",
               "--seeds", "0,1") == 0
    body = json.loads(capsys.readouterr().out)
    assert body["results"]["aggregate"]["n"] == 2
    assert run("eval", "--checkpoint", tmp_path / "r0" / "final.ckpt", "--data", tmp_path / "lz",
               "--protocol", "movie", "--window", 0) == 0


def test_gradcheck_passes_and_lists_groups(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    for group in ("fx", "enc_c", "enc_s", "prior", "dec", "cell_c", "cell_s"):
        assert f"group {group}" in out
    assert "PASS" in out


def test_gradcheck_fails_on_corrupted_rule(monkeypatch, capsys):
    from tidespl import numerics as nx
    good = nx.BACKWARD_RULES["softplus"]
    monkeypatch.setitem(nx.BACKWARD_RULES, "softplus", lambda ctx, g: tuple(0.9 * v for v in good(ctx, g)))
    assert run("gradcheck") == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_help_and_bad_usage(capsys):
    assert run("--help") == 0
    assert run("train") == cli.EXIT_USAGE
