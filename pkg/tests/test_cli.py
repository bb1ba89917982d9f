import json
import shutil

import numpy as np
import pytest

from splatnav.cli import MANIFEST, main
from splatnav.render import read_ppm
from splatnav.runconfig import RunConfig, bundled_config, load_config

TINY = str(bundled_config("tiny"))


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "run"
    assert main(["pipeline", "--config", TINY, "--out", str(out), "--seed", "3"]) == 0
    return out


def test_defaults_match_reference_hyperparameters():
    c = RunConfig()
    assert (c.train.ppo.batch_size, c.train.ppo.horizon, c.train.ppo.lr, c.train.ppo.clip) == (1024, 10240, 3e-4, 0.2)
    assert (c.env.v_max, c.env.w_max, c.env.r_goal, c.env.r_col, c.env.t_limit, c.env.kappa) == (1.5, 1.5, 10, -1, 5000, 0.1)
    assert (c.pretrain.encoder.temperature, c.pretrain.encoder.feature_dim, c.pretrain.encoder.out_dim) == (0.07, 256, 128)
    assert c.pretrain.encoder.resolution == c.env.resolution == c.collect.resolution == 64
    assert c.collect.images == 10000 and c.env.success_radius == 0.5


@pytest.mark.parametrize("patch, field", [
    ({"train": {"ppo": {"bach_size": 4}}}, "train.ppo.bach_size"),
    ({"colect": {}}, "colect"),
    ({"env": {"t_limit": "long"}}, "env.t_limit"),
    ({"pretrain": {"denominator": "full"}}, "pretrain"),
    ({"collect": {"resolution": 32}}, "resolution"),
])
def test_invalid_config_exits_2_naming_the_field(tmp_path, capsys, patch, field):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(patch))
    code, err = run(capsys, "pipeline", "--config", str(p), "--out", str(tmp_path / "o"))
    assert code == 2
    assert field in err
    assert not (tmp_path / "o").exists()


def test_config_paths_resolve_against_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"out_dir": "runs/x", "world": {"template": "layout.json"}}))
    cfg = load_config(p)
    assert cfg.out_dir == str(tmp_path / "runs" / "x")
    assert cfg.world.template == str(tmp_path / "layout.json")


def test_pipeline_emits_metrics_and_manifests(tiny_run):
    report = json.loads((tiny_run / "eval" / "metrics.json").read_text())
    assert {"OS", "SR", "CR", "NE", "TTS", "SPL", "M"} <= set(report)
    assert report["M"] == 4
    for stage in ("scene", "dataset", "encoder", "policy", "eval"):
        m = json.loads((tiny_run / stage / MANIFEST).read_text())
        assert {"inputs", "seed", "git_describe", "wall_time_s", "outputs", "config"} <= set(m)
        assert m["seed"] == 3
        assert not (tiny_run / f"{stage}.partial").exists()
    train_rep = json.loads((tiny_run / "policy" / "train_report.json").read_text())
    assert train_rep["encoder_checksum_before"] == train_rep["encoder_checksum_after"]
    assert (tiny_run / "eval" / "trajectories.svg").exists()
    assert (tiny_run / "policy" / "reward_curve.svg").exists()


def test_same_seed_same_manifests_modulo_timestamps(tiny_run, tmp_path):
    out = tmp_path / "again"
    shutil.copytree(tiny_run, out)
    assert main(["evaluate", "--config", TINY, "--out", str(out), "--seed", "3"]) == 0
    a = json.loads((tiny_run / "eval" / MANIFEST).read_text())
    b = json.loads((out / "eval" / MANIFEST).read_text())
    for m in (a, b):
        for k in ("wall_time_s", "finished_at"):
            m.pop(k)
        for v in m["inputs"].values():
            v.pop("path")
    assert a == b


def test_corrupted_checkpoint_exits_2_without_report(tiny_run, tmp_path, capsys):
    out = tmp_path / "corrupt"
    shutil.copytree(tiny_run, out)
    shutil.rmtree(out / "eval")
    ckpt = out / "policy" / "policy.ckpt"
    ckpt.write_bytes(ckpt.read_bytes()[:-7])
    code, err = run(capsys, "evaluate", "--config", TINY, "--out", str(out))
    assert code == 2 and "policy checkpoint" in err
    assert not (out / "eval").exists() and not (out / "eval.partial").exists()


def test_missing_input_exits_2(tmp_path, capsys):
    code, err = run(capsys, "pretrain-encoder", "--config", TINY, "--out", str(tmp_path))
    assert code == 2 and "dataset" in err


def test_stage_failure_keeps_partial_outputs(tiny_run, tmp_path, capsys):
    p = tmp_path / "big.json"
    cfg = json.loads(bundled_config("tiny").read_text())
    cfg["pretrain"]["batch"] = 1000
    p.write_text(json.dumps(cfg))
    out = tmp_path / "fail"
    shutil.copytree(tiny_run / "dataset", out / "dataset")
    code, err = run(capsys, "pretrain-encoder", "--config", str(p), "--out", str(out))
    assert code == 1 and "failed" in err
    assert (out / "encoder.partial").is_dir() and not (out / "encoder").exists()


def test_output_root_from_environment(tmp_path, monkeypatch, tiny_run):
    monkeypatch.setenv("SPLATNAV_OUT", str(tmp_path / "envroot"))
    assert main(["render", "--config", TINY, "--scene", str(tiny_run / "scene" / "scene.json"),
                 "--pose", "2", "2", "1.2", "0.5", "--resolution", "12"]) == 0
    img = read_ppm(tmp_path / "envroot" / "render" / "color.ppm")
    assert img.shape == (12, 12, 3) and np.ptp(img) > 0


def test_bad_pose_exits_2(tmp_path, capsys):
    code, _ = run(capsys, "render", "--config", TINY, "--out", str(tmp_path), "--pose", "1", "2")
    assert code == 2
