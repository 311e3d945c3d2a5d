"""Experiment driver: config parsing, the ratio x split x seed x regime matrix, and report tables.

Seeds are hierarchical. The split seed depends on (master seed, ratio index,
split index); the run seed adds the seed index. Inside a run, every phase
derives its own seed from the run seed, and self-training further mixes in
the regime name, so regimes share the split and the finetuned teachers they
have in common but not their student training randomness.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from . import metrics
from .errors import ConfigError, TfsError
from .model import EncoderConfig, init_model, load_checkpoint, save_checkpoint
from .protocols import (
    REGIME_LINEAGE,
    REGIMES,
    RegimeConfig,
    RegimeData,
    RunResult,
    derive_seed,
    run_regime,
    run_tapt,
)
from .text import (
    SINGLE,
    TASK_KINDS,
    SyntheticSpec,
    TaskKind,
    Vocabulary,
    build_vocab,
    generate_synthetic_corpus,
    holdout,
    load_dataset,
    parse_records,
    read_texts,
    sample_split,
)

logger = logging.getLogger(__name__)

TAPT_SCOPES = ("full", "split")
REFERENCE = "TAPT+ST"
DEV_HOLDOUT = 0.1  # fraction of the labeled split used as dev when no dev set is given


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment matrix bit for bit.

    Data comes either from ``synthetic`` (a :class:`SyntheticSpec` dict; dev
    and test are drawn from the same generator) or from JSON Lines files.
    ``regime`` overrides apply to every regime, ``regime_overrides`` to one.
    """

    name: str = "experiment"
    output_dir: str = "runs/experiment"
    synthetic: dict | None = None
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    vocab_path: str | None = None
    task_kind: str = SINGLE
    num_classes: int | None = None
    metric: str = ""
    max_len: int = 64
    labeled_ratios: list = field(default_factory=lambda: [0.01])
    n_splits: int = 3
    n_seeds_per_split: int = 3
    regimes: list = field(default_factory=lambda: list(REGIMES))
    model: dict = field(default_factory=dict)
    regime: dict = field(default_factory=dict)
    regime_overrides: dict = field(default_factory=dict)
    tapt_scope: str = "full"
    master_seed: int = 0
    workers: int = 1
    save_checkpoints: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.labeled_ratios:
            raise ConfigError("labeled_ratios must not be empty")
        for r in self.labeled_ratios:
            if isinstance(r, bool) or not isinstance(r, (int, float)) or not 0 < r < 1:
                raise ConfigError(f"labeled_ratio {r!r} outside (0, 1)")
        for name in ("n_splits", "n_seeds_per_split", "workers", "max_len"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        unknown = [r for r in self.regimes if r not in REGIMES]
        if unknown or not self.regimes:
            raise ConfigError(f"unknown regimes {unknown}; expected a subset of {list(REGIMES)}")
        if len(set(self.regimes)) != len(self.regimes):
            raise ConfigError("regimes must not repeat")
        if self.tapt_scope not in TAPT_SCOPES:
            raise ConfigError(f"tapt_scope must be one of {TAPT_SCOPES}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        if self.synthetic is not None and self.train_path is not None:
            raise ConfigError("give either a synthetic spec or train_path, not both")
        if self.synthetic is None and self.train_path is None:
            self.synthetic = {}
        if self.synthetic is not None:
            if self.task_kind != SINGLE:
                raise ConfigError("the synthetic generator only produces single-sentence classification")
            self.synthetic_spec().validate()
        elif self.num_classes is None:
            raise ConfigError("num_classes is required for file-based datasets")
        for name in self.regime_overrides:
            if name not in REGIMES:
                raise ConfigError(f"regime_overrides names unknown regime {name!r}")
        # surface bad override keys now rather than mid-run
        self.regime_config()
        for name in self.regime_overrides:
            self.regime_config(name)
        self.encoder_config(self.num_classes or 2)

    def synthetic_spec(self) -> SyntheticSpec:
        known = {f.name for f in fields(SyntheticSpec)}
        unknown = sorted(set(self.synthetic or {}) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {', '.join(unknown)}")
        return SyntheticSpec(**(self.synthetic or {}))

    def regime_config(self, regime: str | None = None, seed: int = 0) -> RegimeConfig:
        data = {**self.regime, **(self.regime_overrides.get(regime, {}) if regime else {})}
        data.pop("seed", None)
        return RegimeConfig.from_dict({**data, "regime": regime or "TFS", "seed": seed})

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        known = {f.name for f in fields(EncoderConfig)}
        unknown = sorted(set(self.model) - known - {"vocab_size"})
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
        try:
            return EncoderConfig(**{"max_positions": self.max_len, **self.model, "vocab_size": vocab_size})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_config(source: str | os.PathLike | dict | None = None, overrides: dict | None = None, echo: bool = True) -> ExperimentConfig:
    """Load a JSON config (path or dict), apply overrides and defaults, echo the result.

    The resolved config is written to ``<output_dir>/config.json``.
    """
    if source is None:
        data: dict = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    config = ExperimentConfig.from_dict({**data, **(overrides or {})})
    if echo:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return config


# data


@dataclass
class ExperimentData:
    task: TaskKind
    vocab: Vocabulary
    train: list
    dev: list
    test: list


def load_experiment_data(config: ExperimentConfig) -> ExperimentData:
    if config.synthetic is not None:
        corpus = generate_synthetic_corpus(config.synthetic_spec())
        task = TaskKind(SINGLE, corpus.spec.num_classes, config.metric)
        n = len(corpus.records)
        train = parse_records(corpus.records, task, corpus.vocab, config.max_len, "<synthetic>")
        dev = parse_records(corpus.dev_records, task, corpus.vocab, config.max_len, "<synthetic dev>", n)
        test = parse_records(corpus.test_records, task, corpus.vocab, config.max_len, "<synthetic test>",
                             n + len(dev))
        return ExperimentData(task, corpus.vocab, train, dev, test)
    task = TaskKind(config.task_kind, config.num_classes, config.metric)
    vocab = Vocabulary.load(config.vocab_path) if config.vocab_path else build_vocab(read_texts(config.train_path))
    train = load_dataset(config.train_path, task, vocab, config.max_len)
    dev = load_dataset(config.dev_path, task, vocab, config.max_len, len(train)) if config.dev_path else []
    test = load_dataset(config.test_path, task, vocab, config.max_len, len(train) + len(dev)) if config.test_path else []
    return ExperimentData(task, vocab, train, dev, test)


# execution


def split_seed(config: ExperimentConfig, ratio_index: int, split_index: int) -> int:
    return derive_seed(config.master_seed, "split", ratio_index, split_index)


def run_seed(config: ExperimentConfig, ratio_index: int, split_index: int, seed_index: int) -> int:
    return derive_seed(config.master_seed, "run", ratio_index, split_index, seed_index)


def _run_dir(config: ExperimentConfig, ri: int, si: int, ki: int) -> Path:
    return Path(config.output_dir) / "runs" / f"ratio{ri}_split{si}_seed{ki}"


class _JsonlLog:
    def __init__(self, path: Path, context: dict):
        self.path, self.context = path, context

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({**self.context, **record}, default=str) + "\n")


def _run_group(job: dict) -> list[dict]:
    """All regimes of one (ratio, split, seed) cell; finetuned teachers are shared within it."""
    config: ExperimentConfig = job["config"]
    ri, si, ki = job["cell"]
    out_dir = _run_dir(config, ri, si, ki)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = RegimeData(job["task"], job["labeled"], job["unlabeled"], job["dev"], job["test"], job["base"], job["tapt"])
    seed = run_seed(config, ri, si, ki)
    cache: dict = {}
    records = []
    for regime in config.regimes:
        result_path = out_dir / f"{regime}.json"
        if result_path.exists():
            records.append(json.loads(result_path.read_text()))
            continue
        context = {"ratio": config.labeled_ratios[ri], "split": si, "seed_index": ki, "regime": regime}
        log = _JsonlLog(out_dir / "log.jsonl", context)
        try:
            result = run_regime(regime, data, config.regime_config(regime, seed), cache, log)
        except TfsError as exc:
            raise type(exc)(f"run (ratio={context['ratio']}, split={si}, seed={ki}, regime={regime}) failed: {exc}") from exc
        except Exception as exc:
            raise TfsError(f"run (ratio={context['ratio']}, split={si}, seed={ki}, regime={regime}) failed: {exc!r}") from exc
        if config.save_checkpoints:
            save_checkpoint(result.checkpoint, out_dir / f"{regime}.ckpt")
        record = {"dataset": config.name, **context, "ratio_index": ri, "n_labeled": len(data.labeled),
                  "n_unlabeled": len(data.unlabeled), **result.to_record()}
        tmp = result_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, indent=1))
        tmp.replace(result_path)
        records.append(record)
    return records


def _tapt_checkpoint(config: ExperimentConfig, base, corpus, tag: str, seed: int):
    path = Path(config.output_dir) / "checkpoints" / f"tapt_{tag}"
    if (path / "manifest.json").exists():
        return load_checkpoint(path)
    rc = config.regime_config("TAPT", seed)
    log = _JsonlLog(Path(config.output_dir) / "tapt_log.jsonl", {"tapt": tag})
    ckpt = run_tapt(base, corpus, rc, derive_seed(seed, "tapt"), log)
    save_checkpoint(ckpt, path)
    return ckpt


def execute_experiment(config: ExperimentConfig, data: ExperimentData | None = None) -> list[RunResult]:
    """Run every (ratio, split, seed, regime) cell; completed cells found on disk are reused.

    Returns the results in matrix order and writes ``results.jsonl`` plus the
    report files into the output directory.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_experiment_data(config)
    base = init_model(config.encoder_config(len(data.vocab)), seed=derive_seed(config.master_seed, "base"))
    needs_tapt = any(r in ("TAPT", "STTI", "TFS") for r in config.regimes)
    corpus = [ex for ex, _ in data.train]
    shared_tapt = None
    if needs_tapt and config.tapt_scope == "full":
        shared_tapt = _tapt_checkpoint(config, base, corpus, "full", derive_seed(config.master_seed, "tapt"))

    jobs = []
    for ri, ratio in enumerate(config.labeled_ratios):
        for si in range(config.n_splits):
            labeled, unlabeled = sample_split(data.train, ratio, split_seed(config, ri, si))
            dev = data.dev
            if not dev:
                labeled, dev = holdout(labeled, DEV_HOLDOUT, derive_seed(split_seed(config, ri, si), "dev"))
            tapt = shared_tapt
            if needs_tapt and tapt is None:
                # the TAPT corpus is the full training text either way; only the seed is per split
                tapt = _tapt_checkpoint(config, base, corpus, f"split{si}", derive_seed(config.master_seed, "tapt", si))
            for ki in range(config.n_seeds_per_split):
                jobs.append({"config": config, "cell": (ri, si, ki), "task": data.task, "labeled": labeled,
                             "unlabeled": unlabeled, "dev": dev, "test": data.test, "base": base, "tapt": tapt})

    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            grouped = list(pool.map(_run_group, jobs))
    else:
        grouped = []
        for job in jobs:
            logger.info("running cell %s", job["cell"])
            grouped.append(_run_group(job))
    records = [r for group in grouped for r in group]
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    emit_report(records, out)
    return [RunResult.from_record({k: rec[k] for k in _RESULT_FIELDS}) for rec in records]


_RESULT_FIELDS = [f.name for f in fields(RunResult) if f.name != "checkpoint"]


def load_results(path: str | os.PathLike) -> list[dict]:
    """Result records from a ``results.jsonl`` file or an experiment directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.jsonl"
    if not path.is_file():
        raise ConfigError(f"no results file at {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# reporting


@dataclass
class ReportRow:
    dataset: str
    ratio: float | None
    regime: str
    metric: str
    n: int
    mean: float  # percent
    std: float | None  # percent; None for the reference row
    gain: float | None  # percent points over FT


@dataclass
class ReportTable:
    rows: list[ReportRow]
    warnings: list[str] = field(default_factory=list)

    def groups(self) -> list[tuple[str, float | None]]:
        seen: dict = {}
        for r in self.rows:
            seen.setdefault((r.dataset, r.ratio), None)
        return list(seen)

    def group_rows(self, dataset: str, ratio) -> list[ReportRow]:
        return [r for r in self.rows if r.dataset == dataset and r.ratio == ratio]

    def lookup(self, dataset: str, ratio, regime: str) -> ReportRow | None:
        return next((r for r in self.group_rows(dataset, ratio) if r.regime == regime), None)

    def to_tsv(self) -> str:
        lines = ["\t".join(("dataset", "ratio", "regime", "metric", "n", "mean", "std", "gain", "init", "pseudo"))]
        for r in self.rows:
            init, pseudo = REGIME_LINEAGE.get(r.regime, ("", ""))
            lines.append("\t".join((
                r.dataset, "" if r.ratio is None else repr(r.ratio), r.regime, r.metric, str(r.n), _pct(r.mean),
                "" if r.std is None else _pct(r.std), "" if r.gain is None else _signed(r.gain), init, pseudo,
            )))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        blocks = [_text_block(self, ds, ratio) for ds, ratio in self.groups()]
        text = "\n\n".join(blocks) + "\n"
        if self.warnings:
            text += "\n" + "\n".join(f"warning: {w}" for w in self.warnings) + "\n"
        return text


def _round(x: float) -> float:
    # trims float noise so one-decimal formatting follows the decimal arithmetic
    return round(x, 9)


def _pct(x: float) -> str:
    return f"{_round(x):.1f}"


def _signed(x: float) -> str:
    return f"{_round(x):+.1f}"


def _text_block(table: ReportTable, dataset: str, ratio) -> str:
    rows = table.group_rows(dataset, ratio)
    metric = rows[0].metric or "metric"
    title = dataset if ratio is None else f"{dataset}  labeled_ratio={ratio:g}"
    show_gain = any(r.gain is not None for r in rows)
    header = ["regime", f"{metric} (%)"] + (["gain"] if show_gain else []) + ["runs"]
    body = []
    for r in rows:
        value = _pct(r.mean) if r.std is None else f"{_pct(r.mean)}±{_pct(r.std)}"
        line = [r.regime, value]
        if show_gain:
            line.append("" if r.gain is None else f"({_signed(r.gain)})")
        line.append(str(r.n) if r.std is not None else "")
        body.append(line)
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = [f"== {title} =="] + ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + body]
    if any(r.regime == "STTI" for r in rows):
        lines += ["", _lineage_block(rows, metric)]
    return "\n".join(lines)


def _lineage_block(rows: Sequence[ReportRow], metric: str) -> str:
    by_regime = {r.regime: r for r in rows}
    order = [g for g in REGIMES if g in by_regime]
    table = [[""] + order,
             ["Init."] + [REGIME_LINEAGE[g][0] for g in order],
             ["Pseud."] + [REGIME_LINEAGE[g][1] for g in order],
             [metric] + [_pct(by_regime[g].mean) for g in order]]
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)


def build_report(results: Iterable[dict]) -> ReportTable:
    """Aggregate result records into report rows.

    Each record needs ``regime``, ``metric`` and ``test`` (a fraction in
    [0, 1]); ``dataset`` and ``ratio`` group the rows. Records without a
    test value are skipped.
    """
    results = [r for r in results if r.get("test") is not None]
    if not results:
        raise ConfigError("no results to report")
    groups: dict = {}
    for r in results:
        if r["regime"] not in REGIMES:
            raise ConfigError(f"result has unknown regime {r['regime']!r}")
        groups.setdefault((r.get("dataset", ""), r.get("ratio")), {}).setdefault(r["regime"], []).append(r)
    rows: list[ReportRow] = []
    warnings: list[str] = []
    for (dataset, ratio), by_regime in groups.items():
        aggs = {}
        for regime in [g for g in REGIMES if g in by_regime]:
            recs = by_regime[regime]
            metric_names = {rec["metric"] for rec in recs}
            if len(metric_names) > 1:
                raise ConfigError(f"{dataset}/{regime}: mixed metrics {sorted(metric_names)}")
            aggs[regime] = metrics.aggregate([100 * float(rec["test"]) for rec in recs], regime, metric_names.pop())
        ft = aggs.get("FT")
        if ft is None and len(aggs) > 1:
            warnings.append(f"{dataset or 'results'}{'' if ratio is None else f' ratio={ratio:g}'}: no FT row, gains omitted")
        for regime, agg in aggs.items():
            gain = None if ft is None or regime == "FT" else agg.mean - ft.mean
            rows.append(ReportRow(dataset, ratio, regime, agg.metric, len(agg.values), agg.mean, agg.std, gain))
        if all(k in aggs for k in ("FT", "TAPT", "ST")):
            ref = metrics.additive_reference(aggs["FT"], aggs["TAPT"], aggs["ST"])
            rows.append(ReportRow(dataset, ratio, REFERENCE, ft.metric, 0, ref, None, ref - ft.mean))
    for w in warnings:
        logger.warning(w)
    return ReportTable(rows, warnings)


def emit_report(results: Iterable[dict], out_dir: str | os.PathLike | None = None) -> ReportTable:
    """Build the report and, given ``out_dir``, write ``report.tsv`` and ``report.txt``."""
    table = build_report(results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(table.to_tsv(), encoding="utf-8")
        (out / "report.txt").write_text(table.to_text(), encoding="utf-8")
    return table
