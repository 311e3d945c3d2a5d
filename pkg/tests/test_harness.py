import json
import shutil

import pytest

from tfs_lab import harness as H
from tfs_lab.errors import ConfigError
from tfs_lab.metrics import aggregate

TINY = {
    "synthetic": {"vocab_size": 40, "num_examples": 200, "signal_per_class": 8, "signal_tokens": 3, "min_len": 4,
                  "max_len": 8, "dev_examples": 30, "test_examples": 40, "noise_rate": 0.1},
    "model": {"hidden_size": 8, "num_layers": 1, "num_heads": 2, "ff_size": 16, "dropout": 0.0},
    "regime": {"tapt_epochs": 1, "finetune_epochs": 2, "max_rounds": 2, "batch_size": 8, "pseudo_batch_size": 64},
    "labeled_ratios": [0.1],
    "max_len": 16,
}


def published(dataset, means, ratio=None):
    return [{"dataset": dataset, "ratio": ratio, "regime": r, "metric": "accuracy", "test": v / 100}
            for r, v in means.items()]


# config


def test_empty_config_file_gives_defaults_and_is_echoed(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("")
    cfg = H.parse_config(path, {"output_dir": str(tmp_path / "out")})
    assert cfg.n_splits == 3 and cfg.n_seeds_per_split == 3 and cfg.labeled_ratios == [0.01]
    assert cfg.regimes == ["FT", "TAPT", "ST", "STTI", "TFS"]
    echoed = json.loads((tmp_path / "out" / "config.json").read_text())
    assert echoed == cfg.to_dict()
    assert H.ExperimentConfig.from_dict(echoed) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="outside"):
        H.parse_config({"labeled_ratios": [1.5]}, echo=False)
    with pytest.raises(ConfigError, match="leanring_rate"):
        H.parse_config({"leanring_rate": 0.1}, echo=False)
    with pytest.raises(ConfigError, match="leanring_rate"):
        H.parse_config({"regime": {"leanring_rate": 0.1}}, echo=False)
    with pytest.raises(ConfigError):
        H.parse_config({"n_splits": 0}, echo=False)
    with pytest.raises(ConfigError):
        H.parse_config({"regimes": ["FT", "XX"]}, echo=False)
    with pytest.raises(ConfigError):
        H.parse_config(tmp_path / "missing.json", echo=False)
    with pytest.raises(ConfigError):
        H.parse_config({"train_path": "x.jsonl"}, echo=False)  # no num_classes


# reports


def test_gain_formatting():
    table = H.emit_report(published("SST-2/base", {"FT": 87.3, "TFS": 89.4}))
    assert "(+2.1)" in table.to_text()
    assert H._signed(table.lookup("SST-2/base", None, "TFS").gain) == "+2.1"


def test_published_means_gains_and_reference():
    table = H.emit_report(published("QNLI/base", {"FT": 79.1, "TAPT": 82.0, "ST": 80.2, "TFS": 83.1}))
    text = table.to_text()
    for needle in ("79.1", "82.0±0.0", "(+2.9)", "80.2±0.0", "(+1.1)", "83.1"):
        assert needle in text
    ref = table.lookup("QNLI/base", None, H.REFERENCE)
    assert H._pct(ref.mean) == "83.1" and ref.std is None
    mnli = H.emit_report(published("MNLI/base", {"FT": 57.3, "TAPT": 58.8, "ST": 59.2, "TFS": 60.9}))
    assert H._pct(mnli.lookup("MNLI/base", None, H.REFERENCE).mean) == "60.7"


def test_single_regime_has_no_gain_column():
    text = H.emit_report(published("d", {"TAPT": 80.0})).to_text()
    assert "gain" not in text and "(" not in text.split("\n", 1)[1].replace("(%)", "")


def test_missing_ft_omits_gains_with_warning():
    table = H.emit_report(published("d", {"TAPT": 80.0, "TFS": 81.0}))
    assert all(r.gain is None for r in table.rows)
    assert table.warnings and "FT" in table.warnings[0]
    assert "warning" in table.to_text()


def test_reference_row_only_with_ft_tapt_st():
    assert H.emit_report(published("d", {"FT": 70.0, "TAPT": 71.0, "TFS": 72.0})).lookup("d", None, H.REFERENCE) is None


def test_lineage_block_with_stti(tmp_path):
    low = {"FT": 72.0, "TAPT": 84.5, "ST": 74.1, "STTI": 75.4, "TFS": 85.7}
    high = {"FT": 87.3, "TAPT": 88.5, "ST": 88.4, "STTI": 88.8, "TFS": 89.4}
    table = H.emit_report(published("SST-2", low, 0.001) + published("SST-2", high, 0.01), tmp_path)
    text = (tmp_path / "report.txt").read_text()
    block_lines = [ln.split() for ln in text.splitlines()]
    assert ["Init.", "base", "TAPT*", "base", "TAPT*", "TAPT*"] in block_lines
    assert ["Pseud.", "-", "-", "FT", "FT", "TAPT"] in block_lines
    assert ["accuracy", "72.0", "84.5", "74.1", "75.4", "85.7"] in block_lines
    assert ["accuracy", "87.3", "88.5", "88.4", "88.8", "89.4"] in block_lines
    tsv = (tmp_path / "report.tsv").read_text().splitlines()
    assert tsv[0].split("\t")[:3] == ["dataset", "ratio", "regime"]
    assert len(tsv) == 1 + len(table.rows)


def test_report_requires_results():
    with pytest.raises(ConfigError):
        H.emit_report([])


# execution


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = H.parse_config({**TINY, "output_dir": str(out)})
    return cfg, H.execute_experiment(cfg)


def test_matrix_size_and_files(experiment):
    cfg, results = experiment
    assert len(results) == 3 * 3 * 5
    out = cfg.output_dir
    for name in ("config.json", "results.jsonl", "report.tsv", "report.txt", "tapt_log.jsonl"):
        assert (H.Path(out) / name).exists()
    assert len(H.load_results(out)) == 45


def test_report_reproducible_from_logs(experiment):
    cfg, _ = experiment
    records = H.load_results(cfg.output_dir)
    table = H.build_report(records)
    for row in table.rows:
        if row.regime == H.REFERENCE:
            continue
        values = [100 * r["test"] for r in records if r["regime"] == row.regime]
        agg = aggregate(values)
        assert row.mean == agg.mean and row.std == agg.std
    assert table.to_text() == (H.Path(cfg.output_dir) / "report.txt").read_text()


def test_seeds_are_hierarchical(experiment):
    cfg, results = experiment
    records = H.load_results(cfg.output_dir)
    cell_seeds = {(r["split"], r["seed_index"]): r["seed"] for r in records}
    assert len(set(cell_seeds.values())) == 9
    for r in records:
        assert r["seed"] == H.run_seed(cfg, r["ratio_index"], r["split"], r["seed_index"])
    # the same split is shared by every regime and seed of a cell
    sizes = {(r["split"], r["n_labeled"], r["n_unlabeled"]) for r in records}
    assert len({s[0] for s in sizes}) == 3


def test_resume_and_rerun_identical(experiment, tmp_path):
    cfg, results = experiment
    report = (H.Path(cfg.output_dir) / "report.txt").read_text()
    # drop one finished run; the rerun must recreate it bit for bit
    victim = H.Path(cfg.output_dir) / "runs" / "ratio0_split1_seed2" / "TFS.json"
    before = json.loads(victim.read_text())
    victim.unlink()
    again = H.execute_experiment(cfg)
    assert json.loads(victim.read_text()) == before
    assert [r.test for r in again] == [r.test for r in results]
    assert (H.Path(cfg.output_dir) / "report.txt").read_text() == report
    # a fresh directory reproduces the same numbers from scratch
    fresh = H.parse_config({**TINY, "output_dir": str(tmp_path / "fresh"), "n_splits": 1, "n_seeds_per_split": 1,
                            "regimes": ["FT", "TFS"]})
    first = H.execute_experiment(fresh)
    shutil.rmtree(tmp_path / "fresh")
    second = H.execute_experiment(H.parse_config(fresh.to_dict()))
    assert [(r.test, r.checkpoint_id) for r in first] == [(r.test, r.checkpoint_id) for r in second]


def test_file_based_dataset_holds_out_dev(tmp_path):
    rows = [{"text": f"w{i % 7} w{(i * 3) % 5} x", "label": i % 2} for i in range(60)]
    path = tmp_path / "train.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    cfg = H.parse_config({"train_path": str(path), "test_path": str(path), "num_classes": 2,
                          "output_dir": str(tmp_path / "o"), "n_splits": 1, "n_seeds_per_split": 1,
                          "labeled_ratios": [0.5], "regimes": ["FT"], "model": TINY["model"],
                          "regime": TINY["regime"], "max_len": 16})
    (r,) = H.execute_experiment(cfg)
    rec = H.load_results(tmp_path / "o")[0]
    assert rec["n_labeled"] == 27 and r.dev is not None
