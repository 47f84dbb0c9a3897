import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.cli import cli
from src.config import RunConfig, dump_config
from src.nas.genotype import Genotype, random_genotype
from src.search.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tests.conftest import TINY

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def tiny_config_file(tmp_path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def saved_checkpoint(tmp_path, tiny_config) -> Path:
    arrays = {
        "net/stem.weight": np.ones((2, 3, 3, 3), dtype=np.float32),
        "state/epoch": np.array([5], dtype=np.int64),
        "state/history/lr": np.array([0.025, 0.02]),
        "state/history/w_loss": np.array([2.0, 1.5]),
        "state/history/alpha_loss": np.array([np.nan, 1.7]),
    }
    genotype = random_genotype([True, True], seed=0)
    return save_checkpoint(Checkpoint(dump_config(tiny_config), genotype, arrays), tmp_path / "in.sswp")


def test_inspect_prints_the_desk_schedule(capsys, tmp_path):
    assert cli(["inspect", "--config", str(CONFIGS / "desk.json"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "warmup_end=6" in out
    assert "fpp_start=18" in out
    assert "t_step=3" in out
    assert "prune_epochs=[18, 21, 24, 27] (4 events)" in out


def test_inspect_cifar_preset(capsys, tmp_path):
    assert cli(["inspect", "--config", str(CONFIGS / "cifar_search.json"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "warmup_end=60" in out
    assert "prune_epochs=[180, 186, 192," in out
    assert "294] (20 events)" in out


@pytest.mark.parametrize(
    "argv, code",
    [
        (["inspect", "--no-such-flag"], 1),
        ([], 1),
        (["--help"], 0),
        (["inspect", "--config", "missing.json"], 1),
        (["export"], 1),
        (["train"], 1),
        (["probe", "--random-genotype"], 1),
    ],
)
def test_exit_codes(argv, code, tmp_path):
    assert cli(argv + (["--out", str(tmp_path)] if argv and argv[0] != "--help" else [])) == code


def test_corrupted_checkpoint_exits_with_2(tmp_path, saved_checkpoint):
    raw = bytearray(saved_checkpoint.read_bytes())
    raw[-12] ^= 0xFF
    saved_checkpoint.write_bytes(bytes(raw))
    assert cli(["export", "--resume", str(saved_checkpoint), "--out", str(tmp_path / "out")]) == 2


def test_malformed_genotype_file_is_a_config_error(tmp_path, tiny_config_file):
    genotype = tmp_path / "genotype.json"
    genotype.write_text('{"cells": [{"reduction": true}]}')
    argv = ["train", "--config", str(tiny_config_file), "--genotype", str(genotype), "--out", str(tmp_path)]
    assert cli(argv) == 1


def test_export_writes_genotype_manifest_and_history(tmp_path, saved_checkpoint, capsys):
    out = tmp_path / "export"
    assert cli(["export", "--resume", str(saved_checkpoint), "--out", str(out)]) == 0
    exported = Genotype.from_text((out / "genotype.json").read_text())
    assert exported == load_checkpoint(saved_checkpoint).genotype

    manifest = pd.read_csv(out / "manifest.csv").set_index("name")
    assert manifest.loc["net/stem.weight", "shape"] == "2x3x3x3"
    assert manifest.loc["net/stem.weight", "dtype"] == "float32"
    assert manifest.loc["net/stem.weight", "size"] == 54

    history = pd.read_csv(out / "history.csv")
    assert history["epoch"].tolist() == [0, 1]
    assert "5 arrays" in capsys.readouterr().out


def test_train_random_genotype_without_fine_tuning(tmp_path, tiny_config_file):
    out = tmp_path / "train"
    argv = ["train", "--config", str(tiny_config_file), "--random-genotype", "--epochs", "0"]
    argv += ["--out", str(out)]
    assert cli(argv) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["runs"]) == 1
    assert report["runs"][0]["epochs"] == 0
    resolved = RunConfig(**json.loads((out / "resolved_config.json").read_text()))
    assert resolved.train.epochs == 0


def test_search_then_fine_tune_concomitant_weights(tmp_path, tiny_config_file):
    search_out = tmp_path / "search"
    assert cli(["search", "--config", str(tiny_config_file), "--out", str(search_out)]) == 0
    checkpoint = search_out / "search.sswp"
    assert load_checkpoint(checkpoint).genotype.is_complete

    train_out = tmp_path / "train"
    argv = ["train", "--config", str(tiny_config_file), "--resume", str(checkpoint), "--init", "concomitant"]
    assert cli(argv + ["--epochs", "0", "--out", str(train_out)]) == 0
    assert json.loads((train_out / "report.json").read_text())["runs"][0]["init"] == "concomitant"

    probe_out = tmp_path / "probe"
    argv = ["probe", "--config", str(tiny_config_file), "--resume", str(checkpoint)]
    assert cli(argv + ["--out", str(probe_out)]) == 0
    probe = json.loads((probe_out / "probe.json").read_text())
    assert 0.0 <= probe["accuracy"] <= 1.0


def test_pretrain_writes_a_loadable_checkpoint(tmp_path, tiny_config_file):
    out = tmp_path / "pretrain"
    argv = ["pretrain", "--config", str(tiny_config_file), "--random-genotype", "--epochs", "1"]
    argv += ["--out", str(out)]
    assert cli(argv) == 0
    checkpoint = load_checkpoint(out / "pretrain.sswp")
    assert checkpoint.genotype.is_complete
    assert len(checkpoint.arrays["state/history/ssl_loss"]) == 1
    assert checkpoint.section("net")


def test_train_takes_its_config_from_the_resumed_checkpoint(tmp_path, tiny_config_file, tiny_config):
    search_out = tmp_path / "search"
    assert cli(["search", "--config", str(tiny_config_file), "--out", str(search_out)]) == 0
    checkpoint = search_out / "search.sswp"

    train_out = tmp_path / "train"
    argv = ["train", "--resume", str(checkpoint), "--init", "concomitant", "--epochs", "0"]
    assert cli(argv + ["--fraction", "0.5", "--out", str(train_out)]) == 0
    resolved = RunConfig(**json.loads((train_out / "resolved_config.json").read_text()))
    assert resolved.network == tiny_config.network
    assert resolved.dataset == tiny_config.dataset
    assert resolved.train.labeled_fraction == 0.5

    probe_out = tmp_path / "probe"
    assert cli(["probe", "--resume", str(checkpoint), "--out", str(probe_out)]) == 0


def test_config_with_a_different_network_than_the_checkpoint_is_rejected(tmp_path, saved_checkpoint):
    argv = ["train", "--config", str(CONFIGS / "desk.json"), "--resume", str(saved_checkpoint)]
    assert cli(argv + ["--epochs", "0", "--out", str(tmp_path / "train")]) == 1
    assert not (tmp_path / "train" / "resolved_config.json").exists()
