"""End-to-end checks of the command-line interface via main(argv)."""
import json

import numpy as np
import pytest

from raypatch.cli import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE,
                          arm_config, main, run_config_from_dict)
from raypatch.scene import load_scene, read_mesh
from raypatch.trainer import TrainConfig, checkpoint_load


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    rc = main(["synth", "--shape", "sphere", "--radius", "0.5",
               "--views", "5", "--res", "24", "--points", "1500",
               "--out", str(d)])
    assert rc == EXIT_OK
    return d


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    rc = main(["train", "--scene", str(scene_dir), "--out", str(d),
               "--epochs", "10", "--bundles", "2", "--seed", "3", "--quiet"])
    assert rc == EXIT_OK
    return d


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--no-such-flag"]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE
    capsys.readouterr()


def test_bad_bundle_size_is_usage_error(capsys):
    rc = main(["train", "--scene", "x", "--out", "y", "--bundle-size", "3x"])
    assert rc == EXIT_USAGE
    assert "bundle-size" in capsys.readouterr().err


def test_missing_scene_is_data_error(tmp_path, capsys):
    rc = main(["train", "--scene", str(tmp_path / "nope"),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA
    assert "manifest" in capsys.readouterr().err


def test_invalid_config_value_is_data_error(scene_dir, tmp_path, capsys):
    rc = main(["train", "--scene", str(scene_dir), "--out", str(tmp_path),
               "--epochs", "-2"])
    assert rc == EXIT_DATA
    assert "steps" in capsys.readouterr().err


def test_unknown_config_field_is_data_error(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"bogus": 1}}')
    rc = main(["train", "--scene", str(scene_dir), "--out", str(tmp_path),
               "--config", str(cfg)])
    assert rc == EXIT_DATA
    assert "bogus" in capsys.readouterr().err


def test_train_writes_config_log_checkpoint(run_dir):
    assert (run_dir / "config.json").exists()
    assert (run_dir / "train.log").exists()
    assert (run_dir / "last.npz").exists()
    d = json.loads((run_dir / "config.json").read_text())
    assert d["train"]["steps"] == 10
    assert d["train"]["seed"] == 3
    state = checkpoint_load(run_dir / "last.npz")
    assert state.step == 10


def test_zero_epochs_writes_initial_checkpoint(scene_dir, tmp_path, capsys):
    rc = main(["train", "--scene", str(scene_dir), "--out", str(tmp_path),
               "--epochs", "0"])
    assert rc == EXIT_OK
    capsys.readouterr()
    state = checkpoint_load(tmp_path / "last.npz")
    assert state.step == 0
    assert json.loads((tmp_path / "config.json").read_text())["train"]["steps"] == 0
    assert not (tmp_path / "train.log").exists()


def test_config_file_with_flag_overrides(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(
        {"train": {"steps": 4, "n_bundles": 2, "n_dense": 8, "n_sparse": 2,
                   "n_eik": 8}}))
    out = tmp_path / "run"
    rc = main(["train", "--scene", str(scene_dir), "--out", str(out),
               "--config", str(cfg), "--seed", "9", "--bundle-size", "5x3",
               "--quiet"])
    assert rc == EXIT_OK
    capsys.readouterr()
    d = json.loads((out / "config.json").read_text())
    assert d["train"]["steps"] == 4           # from file
    assert d["train"]["seed"] == 9            # flag wins
    assert d["train"]["patch"] == [5, 3]


def test_render_writes_requested_views(run_dir, scene_dir, tmp_path, capsys):
    out = tmp_path / "imgs"
    rc = main(["render", "--checkpoint", str(run_dir / "last.npz"),
               "--scene", str(scene_dir), "--out", str(out),
               "--views", "0,2", "--n-coarse", "12", "--n-fine", "4",
               "--chunk", "128"])
    assert rc == EXIT_OK
    capsys.readouterr()
    assert (out / "view_000.png").exists()
    assert (out / "view_002.png").exists()
    assert not (out / "view_001.png").exists()


def test_render_view_out_of_range(run_dir, scene_dir, tmp_path, capsys):
    rc = main(["render", "--checkpoint", str(run_dir / "last.npz"),
               "--scene", str(scene_dir), "--out", str(tmp_path),
               "--views", "99"])
    assert rc == EXIT_DATA
    assert "out of range" in capsys.readouterr().err


def test_mesh_and_eval_round_trip(run_dir, scene_dir, tmp_path, capsys):
    obj = tmp_path / "m.obj"
    rc = main(["mesh", "--checkpoint", str(run_dir / "last.npz"),
               "--out", str(obj), "--res", "24", "--scene", str(scene_dir)])
    assert rc == EXIT_OK
    mesh = read_mesh(obj)
    assert len(mesh.triangles) > 0

    report = tmp_path / "report.json"
    rc = main(["eval", "--mesh", str(obj), "--scene", str(scene_dir),
               "--out", str(report), "--points", "2000"])
    assert rc == EXIT_OK
    capsys.readouterr()
    d = json.loads(report.read_text())
    assert d["chamfer"] >= 0.0
    assert d["psnr_per_view"] == []


def test_eval_checkpoint_reports_psnr(run_dir, scene_dir, tmp_path, capsys):
    report = tmp_path / "report.json"
    rc = main(["eval", "--checkpoint", str(run_dir / "last.npz"),
               "--scene", str(scene_dir), "--out", str(report),
               "--res", "24", "--points", "2000", "--psnr-views", "1",
               "--n-coarse", "12", "--n-fine", "4", "--chunk", "128"])
    assert rc == EXIT_OK
    assert "desk-scale Chamfer" in capsys.readouterr().out
    d = json.loads(report.read_text())
    assert len(d["psnr_per_view"]) == 1
    assert d["config_hash"]
    assert d["timings"]["mesh"] > 0


def test_eval_requires_exactly_one_source(scene_dir, tmp_path):
    assert main(["eval", "--scene", str(scene_dir),
                 "--out", str(tmp_path / "r.json")]) == EXIT_USAGE


@pytest.mark.slow
def test_ablate_emits_full_grid(scene_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    rc = main(["ablate", "--scene", str(scene_dir), "--out", str(out),
               "--steps", "2", "--seeds", "1", "--mesh-res", "16",
               "--n-dense", "6", "--n-sparse", "2", "--points", "500",
               "--quiet"])
    assert rc == EXIT_OK
    capsys.readouterr()
    d = json.loads((out / "ablation.json").read_text())
    methods = [r["method"] for r in d["rows"]]
    assert methods == [f"exp{i}" for i in range(1, 12)]
    by = {r["method"]: r for r in d["rows"]}
    assert by["exp7"]["size"] == [5, 7]
    assert by["exp9"]["count"] == 57
    # repeated grid labels share one configuration, hence one result
    assert by["exp5"]["chamfer"] == by["exp6"]["chamfer"] == by["exp11"]["chamfer"]
    assert (out / "ablation.txt").read_text().count("exp") == 11
    assert (out / "config.json").exists()


def test_arm_configs():
    base = TrainConfig()
    b = arm_config(base, "bundle")
    assert (b.weights.lambda_m, b.weights.lambda_v, b.weights.lambda_conv) \
        == (0.0, 0.0, 0.0)
    assert b.weights.lambda_eik == base.weights.lambda_eik
    l1 = arm_config(base, "mv-l1")
    assert l1.l1_stats and l1.weights.lambda_conv == 0.0
    l2 = arm_config(base, "mv-l2")
    assert not l2.l1_stats and l2.weights.lambda_conv == 0.0
    assert l2.weights.lambda_m == base.weights.lambda_m
    assert arm_config(base, "laplace").conv_kernel == "laplace"
    assert arm_config(base, "sobel").conv_kernel == "sobel"
    with pytest.raises(ValueError, match="loss arm"):
        arm_config(base, "ransac")


def test_run_config_round_trip():
    cfg = run_config_from_dict({"train": {"steps": 7}, "mesh_res": 32})
    assert cfg.train.steps == 7
    assert cfg.train.n_dense == TrainConfig().n_dense
    assert cfg.mesh_res == 32
    with pytest.raises(ValueError, match="unknown config field"):
        run_config_from_dict({"mesh_resolution": 32})


def test_numeric_failure_exit_code(scene_dir, tmp_path, capsys):
    # an absurd learning rate blows the field up within a few steps
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(
        {"train": {"steps": 40, "lr": 1e6, "n_bundles": 2, "n_dense": 8,
                   "n_sparse": 2, "n_eik": 8}}))
    rc = main(["train", "--scene", str(scene_dir), "--out", str(tmp_path / "o"),
               "--config", str(cfg), "--quiet"])
    assert rc == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "non-finite" in err or "numerical failure" in err
