"""``tfs-lab`` command line: each training phase on its own, the full matrix, and reports.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, DataError, TfsError
from .harness import ExperimentConfig, emit_report, execute_experiment, load_results, parse_config
from .model import init_model, load_checkpoint, save_checkpoint
from .protocols import derive_seed, evaluate, run_finetune, run_self_training, run_tapt
from .text import (
    SyntheticSpec,
    TaskKind,
    Vocabulary,
    build_vocab,
    generate_synthetic_corpus,
    load_dataset,
    load_unlabeled,
    read_texts,
    write_jsonl,
)

log = logging.getLogger("tfs_lab")

VOCAB_FILE = "vocab.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _config(path: str | None) -> ExperimentConfig:
    return parse_config(path, echo=False)


def _task(config: ExperimentConfig) -> TaskKind:
    k = config.num_classes
    if k is None:
        k = config.synthetic_spec().num_classes if config.synthetic is not None else None
    if k is None:
        raise ConfigError("config needs num_classes")
    return TaskKind(config.task_kind, k, config.metric)


def _vocab(config: ExperimentConfig, ckpt_dir: str | None, texts_from: list[str]) -> Vocabulary:
    """Config vocabulary, else the one stored with the checkpoint, else built from the given files."""
    if config.vocab_path:
        return Vocabulary.load(config.vocab_path)
    if ckpt_dir and (Path(ckpt_dir) / VOCAB_FILE).is_file():
        return Vocabulary.load(Path(ckpt_dir) / VOCAB_FILE)
    texts = [t for p in texts_from for t in read_texts(p)]
    if not texts:
        raise DataError("no texts to build a vocabulary from")
    return build_vocab(texts)


def _init(spec: str, config: ExperimentConfig, vocab: Vocabulary):
    if spec == "random":
        return init_model(config.encoder_config(len(vocab)), seed=derive_seed(config.master_seed, "base"))
    ckpt = load_checkpoint(spec)
    if ckpt.config.vocab_size != len(vocab):
        raise ConfigError(f"checkpoint vocabulary size {ckpt.config.vocab_size} != vocabulary size {len(vocab)}")
    return ckpt


def _save(ckpt, vocab: Vocabulary, out: str) -> None:
    save_checkpoint(ckpt, out)
    vocab.save(Path(out) / VOCAB_FILE)


def _print_log(record: dict) -> None:
    log.info(json.dumps(record, default=str))


def cmd_gen_synthetic(args) -> dict:
    data = json.loads(Path(args.spec).read_text()) if args.spec else {}
    try:
        spec = SyntheticSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from None
    corpus = generate_synthetic_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", corpus.records)
    if corpus.dev_records:
        write_jsonl(out / "dev.jsonl", corpus.dev_records)
    if corpus.test_records:
        write_jsonl(out / "test.jsonl", corpus.test_records)
    corpus.vocab.save(out / VOCAB_FILE)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    (out / "signal_words.json").write_text(json.dumps(corpus.signal_words) + "\n")
    return {"out": str(out), "train": len(corpus.records), "dev": len(corpus.dev_records), "test": len(corpus.test_records)}


def cmd_tapt(args) -> dict:
    config = _config(args.config)
    init_dir = None if args.init == "random" else args.init
    vocab = _vocab(config, init_dir, args.corpus)
    task = _task(config)
    corpus = [ex for p in args.corpus for ex in load_unlabeled(p, task, vocab, config.max_len)]
    rc = config.regime_config("TAPT", config.master_seed)
    ckpt = run_tapt(_init(args.init, config, vocab), corpus, rc, derive_seed(config.master_seed, "tapt"), _print_log)
    _save(ckpt, vocab, args.out)
    return {"out": args.out, "checkpoint_id": ckpt.checkpoint_id, "lineage": ckpt.path, "examples": len(corpus)}


def cmd_finetune(args) -> dict:
    config = _config(args.config)
    init_dir = None if args.init == "random" else args.init
    vocab = _vocab(config, init_dir, [args.train])
    task = _task(config)
    train = load_dataset(args.train, task, vocab, config.max_len)
    dev = load_dataset(args.dev, task, vocab, config.max_len, len(train)) if args.dev else None
    rc = config.regime_config("FT", config.master_seed)
    init = _init(args.init, config, vocab)
    ckpt = run_finetune(init, train, task, rc, dev, derive_seed(config.master_seed, "finetune", init.path), _print_log)
    _save(ckpt, vocab, args.out)
    result = {"out": args.out, "checkpoint_id": ckpt.checkpoint_id, "lineage": ckpt.path}
    if dev:
        result["dev"] = evaluate(ckpt, dev, task, rc.eval_batch_size, rc.threshold, "dev")
    return result


def cmd_selftrain(args) -> dict:
    config = _config(args.config)
    vocab = _vocab(config, args.teacher, [args.labeled])
    task = _task(config)
    teacher = _init(args.teacher, config, vocab)
    student_init = _init(args.student_init, config, vocab)
    labeled = load_dataset(args.labeled, task, vocab, config.max_len)
    unlabeled = load_unlabeled(args.unlabeled, task, vocab, config.max_len, len(labeled))
    dev = load_dataset(args.dev, task, vocab, config.max_len, len(labeled) + len(unlabeled)) if args.dev else None
    rc = config.regime_config("TFS", config.master_seed)
    if args.rounds is not None:
        if args.rounds < 1:
            raise ConfigError("--rounds must be at least 1")
        rc.max_rounds = args.rounds
    best, rounds = run_self_training(teacher, student_init, labeled, unlabeled, task, rc, dev,
                                     derive_seed(config.master_seed, "selftrain", "cli"), _print_log)
    _save(best, vocab, args.out)
    return {"out": args.out, "checkpoint_id": best.checkpoint_id, "lineage": best.path,
            "pseudo_labeler": best.pseudo_labeler, "rounds": [asdict(r) for r in rounds]}


def cmd_run(args) -> dict:
    overrides = {"output_dir": args.output_dir} if args.output_dir else None
    config = parse_config(args.config, overrides)
    results = execute_experiment(config)
    print((Path(config.output_dir) / "report.txt").read_text(), end="")
    return {"output_dir": config.output_dir, "runs": len(results)}


def cmd_report(args) -> dict:
    table = emit_report(load_results(args.results), args.out)
    print(table.to_text(), end="")
    return {"out": args.out, "rows": len(table.rows)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tfs-lab", description="TAPT, finetuning and self-training experiments on a small encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch and round")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a synthetic classification corpus")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("tapt", help="continue MLM training on task texts")
    t.add_argument("--config", help="experiment config JSON (model, regime, task fields)")
    t.add_argument("--corpus", nargs="+", required=True, help="JSON Lines files whose texts form the corpus")
    t.add_argument("--init", required=True, help="checkpoint directory or 'random'")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tapt)

    f = sub.add_parser("finetune", help="supervised finetuning on labeled data")
    f.add_argument("--config")
    f.add_argument("--init", required=True, help="checkpoint directory or 'random'")
    f.add_argument("--train", required=True)
    f.add_argument("--dev")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    s = sub.add_parser("selftrain", help="teacher/student self-training rounds")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student-init", required=True)
    s.add_argument("--unlabeled", required=True)
    s.add_argument("--labeled", required=True)
    s.add_argument("--dev")
    s.add_argument("--rounds", type=int)
    s.add_argument("--out", default="selftrain_student")
    s.set_defaults(func=cmd_selftrain)

    r = sub.add_parser("run", help="run the full ratio x split x seed x regime matrix")
    r.add_argument("--config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate results.jsonl into report tables")
    rep.add_argument("--results", required=True, help="experiment directory or results.jsonl")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        summary = args.func(args)
    except TfsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    if args.command not in ("run", "report"):
        print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
