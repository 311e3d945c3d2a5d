import json
import subprocess
import sys

import pytest

from tfs_lab.cli import main
from tfs_lab.model import load_checkpoint

SPEC = {"vocab_size": 40, "num_examples": 120, "signal_per_class": 8, "signal_tokens": 3, "min_len": 4, "max_len": 8,
        "dev_examples": 20, "test_examples": 20, "noise_rate": 0.0}
CONFIG = {"num_classes": 2, "max_len": 16,
          "model": {"hidden_size": 8, "num_layers": 1, "num_heads": 2, "ff_size": 16, "dropout": 0.0},
          "regime": {"tapt_epochs": 1, "finetune_epochs": 2, "max_rounds": 2, "batch_size": 8}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "config.json").write_text(json.dumps({**CONFIG, "vocab_path": str(root / "data" / "vocab.txt")}))
    assert main(["gen-synthetic", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root


def test_gen_synthetic_outputs(workspace):
    data = workspace / "data"
    assert len((data / "train.jsonl").read_text().splitlines()) == 120
    assert (data / "vocab.txt").read_text().splitlines()[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def test_phase_commands_chain(workspace, capsys):
    d, cfg = workspace / "data", str(workspace / "config.json")
    assert main(["tapt", "--config", cfg, "--corpus", str(d / "train.jsonl"), "--init", "random",
                 "--out", str(workspace / "tapt")]) == 0
    tapt = load_checkpoint(workspace / "tapt")
    assert tapt.path == "random_init>tapt"
    assert main(["finetune", "--config", cfg, "--init", str(workspace / "tapt"), "--train", str(d / "dev.jsonl"),
                 "--dev", str(d / "test.jsonl"), "--out", str(workspace / "teacher")]) == 0
    assert load_checkpoint(workspace / "teacher").path == "random_init>tapt>finetuned"
    capsys.readouterr()
    assert main(["selftrain", "--config", cfg, "--teacher", str(workspace / "teacher"), "--student-init",
                 str(workspace / "tapt"), "--unlabeled", str(d / "train.jsonl"), "--labeled", str(d / "dev.jsonl"),
                 "--rounds", "1", "--out", str(workspace / "student")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert len(summary["rounds"]) == 1
    student = load_checkpoint(workspace / "student")
    assert student.path == "random_init>tapt>student_round_1"
    assert student.pseudo_labeler == "random_init>tapt>finetuned"


def test_run_and_report(workspace, capsys):
    cfg = workspace / "exp.json"
    cfg.write_text(json.dumps({**CONFIG, "num_classes": None, "synthetic": SPEC, "labeled_ratios": [0.2],
                               "n_splits": 1, "n_seeds_per_split": 2, "output_dir": str(workspace / "exp")}))
    assert main(["run", "--config", str(cfg)]) == 0
    assert "TAPT+ST" in capsys.readouterr().out
    assert main(["report", "--results", str(workspace / "exp"), "--out", str(workspace / "rep")]) == 0
    assert (workspace / "rep" / "report.txt").read_text() == (workspace / "exp" / "report.txt").read_text()


def test_exit_codes(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"leanring_rate": 1}))
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"text": "w001", "label": 0}\n{"text": "w002", "label": 9}\n')
    cfg = str(workspace / "config.json")
    assert main(["finetune", "--config", cfg, "--init", "random", "--train", str(broken), "--out",
                 str(tmp_path / "o")]) == 2
    assert main(["finetune", "--config", cfg, "--init", "random", "--train", str(tmp_path / "none.jsonl"), "--out",
                 str(tmp_path / "o")]) == 2
    assert main(["selftrain", "--config", cfg, "--teacher", str(workspace / "tapt"), "--student-init",
                 str(workspace / "tapt"), "--unlabeled", str(workspace / "data" / "train.jsonl"), "--labeled",
                 str(workspace / "data" / "dev.jsonl")]) == 3  # teacher without a task head
    with pytest.raises(SystemExit) as info:
        main(["finetune", "--bogus"])
    assert info.value.code == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tfs_lab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-synthetic" in out.stdout
