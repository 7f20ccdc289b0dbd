#!/usr/bin/env python3
"""
End-to-end tests of the ``slab`` command line: exit codes, messages and the
files each subcommand writes.
"""

import sys
import json
from pathlib import Path

import pytest

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, load_cli_config, main
from config import config, ConfigError
from checkpoint import load_checkpoint, save_checkpoint
from model import ModelConfig, SlabModel

TINY = """
[model]
depth = 1
dim = 8
heads = 2
image_size = 4
patch_size = 2
num_classes = 2

[train]
epochs = 2
batch_size = 16
base_lr = 1e-3
warmup_epochs = 1
recalib_epochs = 1

[data]
num_samples = 64
"""


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    """Run every command inside tmp_path without a log file."""
    monkeypatch.chdir(tmp_path)
    config.override("logging", "file_logging", False)
    yield
    config.override("logging", "file_logging", True)


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "out")])
    assert code == EXIT_USAGE
    assert "nope.toml" in capsys.readouterr().err, "the error names the missing path"


def test_unknown_key_names_the_key(tmp_path, capsys):
    path = _write(tmp_path, "[train]\nepohcs = 3\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "epohcs" in err and "[train]" in err


def test_bad_arguments_exit_2():
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["verify", "--suite", "speed"]) == EXIT_USAGE


def test_data_geometry_follows_model(tmp_path):
    cli_config = load_cli_config(_write(tmp_path, TINY))
    assert cli_config.data.image_size == 4 and cli_config.data.num_classes == 2
    with pytest.raises(ConfigError) as info:
        load_cli_config(_write(tmp_path, TINY + "image_size = 8\n", "bad.toml"))
    assert info.value.section == "data" and info.value.key == "image_size"


def test_train_then_fuse_twice(tmp_path, capsys):
    """Training writes checkpoint, metrics and snapshot; the result fuses, and fusing again is a no-op."""
    out = tmp_path / "run"
    assert main(["train", "--config", str(_write(tmp_path, TINY)), "--out", str(out), "--seed", "1"]) == EXIT_OK
    checkpoint = out / config.storage["checkpoint_name"]
    assert checkpoint.exists() and (out / config.storage["metrics_name"]).exists()
    snapshot = json.loads((out / "config_snapshot.json").read_text())
    assert snapshot["model"]["seed"] == 1 and snapshot["command"] == "train"
    assert "Final gamma: 0.000000" in capsys.readouterr().out

    fused = tmp_path / "fused.slab"
    assert main(["fuse", "--checkpoint", str(checkpoint), "--out", str(fused)]) == EXIT_OK
    assert "max |logit diff| on 8 random batches" in capsys.readouterr().out
    assert load_checkpoint(fused).config.fused

    again = tmp_path / "fused_again.slab"
    assert main(["fuse", "--checkpoint", str(fused), "--out", str(again)]) == EXIT_OK
    assert "already fused" in capsys.readouterr().out
    assert load_checkpoint(again).config == load_checkpoint(fused).config


def test_fuse_rejects_unconverged_model(tmp_path, capsys):
    model = SlabModel(ModelConfig(depth=1, dim=8, heads=2, image_size=4, patch_size=2, num_classes=2))
    path = save_checkpoint(model, tmp_path / "fresh.slab")
    assert main(["fuse", "--checkpoint", str(path), "--out", str(tmp_path / "f.slab")]) == EXIT_FAILURE
    assert "gamma" in capsys.readouterr().err
    assert not (tmp_path / "f.slab").exists(), "nothing is written for an unconverged model"

    assert main(["fuse", "--checkpoint", str(tmp_path / "missing.slab"), "--out", "x.slab"]) == EXIT_USAGE


def test_verify_exit_codes(capsys):
    assert main(["verify", "--suite", "lemma"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["verify", "--suite", "lemma", "--debug-perturb-eta", "0.01"]) == EXIT_FAILURE
    assert "Verification FAILED" in capsys.readouterr().out


def test_bench_with_one_sequence_length(tmp_path, capsys):
    """A single N still reports latencies, with a notice instead of a slope."""
    report = tmp_path / "bench.csv"
    args = ["bench", "--target", "attention", "--seq-lens", "8", "--dims", "8", "--heads", "2",
            "--warmup-iters", "0", "--out", str(report)]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert "Notice:" in out and "sla vs softmax" in out
    assert report.exists() and (tmp_path / "bench_plot.py").exists()

    assert main(args + ["--require-slope"]) == EXIT_FAILURE
    assert main(["bench", "--target", "attention", "--variants", "flash", "--out", str(report)]) == EXIT_USAGE


def test_flops_table(tmp_path, capsys):
    assert main(["flops", "--config", str(_write(tmp_path, TINY))]) == EXIT_OK
    out = capsys.readouterr().out
    assert "total" in out and "attn_core" in out
