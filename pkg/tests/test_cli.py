import json

import pytest

from clusir.cli import main


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "steps_per_epoch": 2, "batch": 2, "patch": 32, "n_clean": 3,
                               "clean_size": 48, "val_per_task": 1, "val_size": 32,
                               "model": {"embed_dim": 8}}))
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "1"]) == 0
    return out


def test_synth_and_eval_on_folder(trained, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--tasks", "noise", "haze", "--images", "2",
                 "--clean-size", "40", "--patch", "32", "--seed", "3"]) == 0
    assert len(list((data / "noise" / "degraded").glob("*.png"))) == 2
    report = tmp_path / "eval.json"
    assert main(["eval", str(trained / "checkpoint.pt"), "--data", str(data), "--out", str(report)]) == 0
    rows = json.loads(report.read_text())
    assert {r["task"] for r in rows} == {"noise", "haze"}


def test_eval_synthetic(trained, capsys):
    assert main(["eval", str(trained / "checkpoint.pt"), "--per-task", "1", "--size", "32"]) == 0
    assert "psnr" in capsys.readouterr().out


@pytest.mark.parametrize("what", ["stats", "mse", "embed", "affinity", "spectrum"])
def test_diagnose(trained, tmp_path, what):
    args = ["diagnose", what, str(trained / "checkpoint.pt"), "--out", str(tmp_path), "--per-task", "2",
            "--size", "32"]
    assert main(args) == 0
    assert any(tmp_path.iterdir())


def test_resume_and_max_steps(trained, tmp_path):
    assert main(["train", "--resume", str(trained / "checkpoint.pt"), "--out", str(tmp_path),
                 "--epochs", "1", "--steps-per-epoch", "2", "--batch", "2", "--patch", "32",
                 "--model", '{"embed_dim": 8}', "--max-steps", "2"]) == 0


def test_ablate(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"batch": 1, "patch": 32, "n_clean": 2, "clean_size": 32, "val_per_task": 1,
                               "val_size": 32, "model": {"embed_dim": 8}}))
    assert main(["ablate", "--matrix", "init", "--config", str(cfg), "--out", str(tmp_path / "ab"),
                 "--epochs", "1", "--steps-per-epoch", "1"]) == 0
    out = capsys.readouterr().out
    assert "orthogonal" in out and "random" in out
    assert (tmp_path / "ab" / "ablation.csv").exists()


def test_parameter_error_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--lr", "-1"]) == 1
    assert main(["train", "--out", str(tmp_path), "--ablation", '{"bogus": 1}']) == 1
    assert main(["train", "--out", str(tmp_path), "--ablation", "not json"]) == 1
    assert main(["eval", str(tmp_path / "missing.pt")]) == 1
    assert "error" in capsys.readouterr().err


def test_numerical_error_exit_code(tmp_path, capsys):
    # a learning rate this large drives the weights to inf within a couple of steps
    code = main(["train", "--out", str(tmp_path), "--lr", "1e30", "--epochs", "1", "--steps-per-epoch", "5",
                 "--batch", "1", "--patch", "32", "--model", '{"embed_dim": 8}'])
    assert code == 2
    assert "last good checkpoint" in capsys.readouterr().err


def test_usage_error_is_parameter_error(capsys):
    assert main(["diagnose", "nonsense", "x", "--out", "y"]) == 1
    assert main(["--help"]) == 0
