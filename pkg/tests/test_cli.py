import os
import csv
import re
import shutil
import logging

import pytest
import torch
import yaml

from generic import RunConfig
from checkpoint import load_checkpoint
from cli import main
from toy_dataset import write_manifest, write_toy_dataset, DatasetManifest

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs")
DIAGNOSE_CONFIG = os.path.join(CONFIG_DIR, "diagnose.yaml")


@pytest.fixture
def train_config(tmp_path):
    config = RunConfig(experiment_tag="cli", arch="resnet8", width_divisor=8, timesteps=2, batch_size=8, epochs=2,
                       dataset_kind="two_gaussians", dataset_root=str(tmp_path / "data"), n_per_class=8,
                       n_test_per_class=4, image_size=8)
    path = str(tmp_path / "train.yaml")
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f)
    return path


def run_in(monkeypatch, output_dir, argv):
    monkeypatch.setenv("STBP_OUTPUT_DIR", str(output_dir))
    return main(argv)


def read(path):
    with open(path, "rb") as f:
        return f.read()


def printed_accuracy(capsys):
    out = capsys.readouterr().out
    return float(re.search(r"accuracy: ([0-9.]+)", out).group(1))


def test_train_writes_metrics_and_checkpoints(tmp_path, monkeypatch, train_config):
    out = tmp_path / "run"
    assert run_in(monkeypatch, out, ["train", train_config]) == 0
    lines = read(str(out / "cli_metrics.csv")).decode().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,eval_acc,lr,mean_firing_rate"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    for name in ("cli_epoch001.ckpt", "cli_epoch002.ckpt", "cli_last.ckpt"):
        assert (out / name).exists()
    checkpoint = load_checkpoint(str(out / "cli_last.ckpt"))
    assert checkpoint.epoch == 2
    assert checkpoint.meta == {"input_channels": 1, "classes": 2, "input_size": 8}


def test_train_is_deterministic(tmp_path, monkeypatch, train_config):
    assert run_in(monkeypatch, tmp_path / "a", ["train", train_config]) == 0
    assert run_in(monkeypatch, tmp_path / "b", ["train", train_config]) == 0
    assert read(str(tmp_path / "a" / "cli_metrics.csv")) == read(str(tmp_path / "b" / "cli_metrics.csv"))
    assert read(str(tmp_path / "a" / "cli_last.ckpt")) == read(str(tmp_path / "b" / "cli_last.ckpt"))


def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch, train_config):
    full, resumed = tmp_path / "full", tmp_path / "resumed"
    assert run_in(monkeypatch, full, ["train", train_config]) == 0
    resumed.mkdir()
    shutil.copy(str(full / "cli_metrics.csv"), str(resumed / "cli_metrics.csv"))
    shutil.copy(str(full / "cli_epoch001.ckpt"), str(resumed / "start.ckpt"))
    argv = ["train", train_config, "-p", "training.resume_from=%s" % (resumed / "start.ckpt")]
    assert run_in(monkeypatch, resumed, argv) == 0
    assert read(str(full / "cli_metrics.csv")) == read(str(resumed / "cli_metrics.csv"))
    a = load_checkpoint(str(full / "cli_last.ckpt"))
    b = load_checkpoint(str(resumed / "cli_last.ckpt"))
    assert list(a.tensors) == list(b.tensors)
    for name in a.tensors:
        assert torch.equal(a.tensors[name], b.tensors[name]), name


def test_bad_config_key_is_a_usage_error(tmp_path, monkeypatch, train_config, caplog):
    with caplog.at_level(logging.ERROR):
        assert run_in(monkeypatch, tmp_path, ["train", train_config, "-p", "model.bogus=1"]) == 2
    assert "unknown config key 'model.bogus'" in caplog.text
    assert run_in(monkeypatch, tmp_path, ["train", train_config, "-p", "model.timesteps=0"]) == 2
    assert run_in(monkeypatch, tmp_path, ["train", str(tmp_path / "missing.yaml")]) == 2


def test_fuse_then_eval(tmp_path, monkeypatch, train_config, capsys):
    out = tmp_path / "run"
    assert run_in(monkeypatch, out, ["train", train_config]) == 0
    unfused, fused = str(out / "cli_last.ckpt"), str(out / "cli_fused.ckpt")
    assert main(["fuse", unfused, fused]) == 0
    assert load_checkpoint(fused).fused
    assert main(["fuse", fused, str(out / "again.ckpt")]) == 2
    assert not (out / "again.ckpt").exists()

    manifest = str(tmp_path / "data" / "test.tsv")
    capsys.readouterr()
    assert main(["eval", unfused, manifest]) == 0
    unfused_accuracy = printed_accuracy(capsys)
    assert main(["eval", fused, manifest]) == 0
    assert printed_accuracy(capsys) == unfused_accuracy


def test_eval_errors(tmp_path, monkeypatch, train_config):
    out = tmp_path / "run"
    assert run_in(monkeypatch, out, ["train", train_config, "-p", "training.epochs=1"]) == 0
    checkpoint = str(out / "cli_last.ckpt")

    empty = DatasetManifest(root=str(tmp_path / "empty"), split="test", class_count=2, encoding="static")
    assert main(["eval", checkpoint, write_manifest(empty)]) == 2

    bars = write_toy_dataset(str(tmp_path / "bars"), "moving_bar", 2, 2, seed=0, timesteps=2)
    assert main(["eval", checkpoint, os.path.join(bars["test"].root, "test.tsv")]) == 3
    assert main(["eval", str(tmp_path / "missing.ckpt"), os.path.join(bars["test"].root, "test.tsv")]) == 3


@pytest.mark.parametrize("kind,params", [
    ("variance", []),
    ("firing", []),
    ("gradnorm", ["diagnostics.depth=10"]),
    ("opcount", ["model.width_divisor=4"]),
])
def test_diagnostics_pass(tmp_path, monkeypatch, capsys, kind, params):
    argv = ["diagnose", kind, DIAGNOSE_CONFIG] + (["-p"] + params if params else [])
    assert run_in(monkeypatch, tmp_path, argv) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS %s" % kind)
    assert (tmp_path / ("diagnose_%s.csv" % kind)).exists()


def test_diagnose_usage_errors(tmp_path, monkeypatch):
    assert run_in(monkeypatch, tmp_path, ["diagnose", "entropy", DIAGNOSE_CONFIG]) == 2
    assert run_in(monkeypatch, tmp_path, ["diagnose", "variance", str(tmp_path / "nope.yaml")]) == 2


def test_gradnorm_uses_the_configured_surrogate_width(tmp_path, monkeypatch, capsys):
    def run(*params):
        code = run_in(monkeypatch, tmp_path, ["diagnose", "gradnorm", DIAGNOSE_CONFIG, "-p"] + list(params))
        return code, capsys.readouterr().out.splitlines()[-1]

    code, line = run("diagnostics.surrogate_width=neuron", "neuron.surrogate_width=1.0")
    assert code == 1
    assert line.startswith("FAIL gradnorm") and "surrogate width 1)" in line
    with open(str(tmp_path / "diagnose_gradnorm.csv")) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["index", "layer", "grad_norm", "surrogate_width"]
    assert {row[3] for row in rows[1:]} == {"1.0"}

    _, narrow = run("diagnostics.surrogate_width=neuron", "neuron.surrogate_width=0.25")
    assert narrow != line
    assert "surrogate width 0.25)" in narrow

    code, line = run("diagnostics.surrogate_width=auto")
    assert code == 0
    assert float(re.search(r"surrogate width ([0-9.]+)\)", line).group(1)) == pytest.approx(1.795, abs=5e-3)
    argv = ["diagnose", "gradnorm", DIAGNOSE_CONFIG, "-p", "diagnostics.surrogate_width=wide"]
    assert run_in(monkeypatch, tmp_path, argv) == 2
