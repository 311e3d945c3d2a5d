"""Vocabulary, greedy subword tokenization, dataset files and split sampling."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ParseError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"
MAX_WORD_CHARS = 100

SINGLE = "single_sentence_classification"
PAIR = "pair_classification"
TAGGING = "token_tagging"
MULTI_LABEL = "multi_label_classification"
TASK_KINDS = (SINGLE, PAIR, TAGGING, MULTI_LABEL)
METRICS = ("accuracy", "binary_f1", "span_f1", "micro_f1")
_DEFAULT_METRIC = {SINGLE: "accuracy", PAIR: "accuracy", TAGGING: "span_f1", MULTI_LABEL: "micro_f1"}


@dataclass(frozen=True)
class TaskKind:
    kind: str
    num_classes: int
    metric: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.num_classes < 2:
            raise ConfigError("a task needs at least 2 classes")
        if not self.metric:
            object.__setattr__(self, "metric", _DEFAULT_METRIC[self.kind])
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")

    @property
    def is_classification(self) -> bool:
        return self.kind in (SINGLE, PAIR)


class Vocabulary:
    """Bijective token <-> id map with the five specials at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:5]) != SPECIALS:
            raise DataError(f"vocabulary must start with {list(SPECIALS)}")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise DataError(f"duplicate vocabulary entry {tok!r}")
            index[tok] = i
        self.id_to_token = tokens
        self.token_to_id = index

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def lookup(self, token: str) -> int | None:
        """Id of a non-special piece, or None. Specials cannot be reached from raw text."""
        i = self.token_to_id.get(token)
        return None if i is None or i < len(SPECIALS) else i

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


def build_vocab(
    corpus: Iterable[str],
    min_count: int = 1,
    max_size: int | None = None,
    extra_pieces: Sequence[str] = (),
) -> Vocabulary:
    """Specials, then whitespace tokens by descending count (ties lexicographic).

    ``extra_pieces`` (typically ``##``-prefixed continuations) are admitted
    even if they never occur as whole tokens; they rank with count 0.
    """
    counts: Counter[str] = Counter()
    lines = 0
    for line in corpus:
        lines += 1
        counts.update(tok for tok in line.split() if tok not in SPECIALS)
    if lines == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    seen = set(ranked)
    ranked += sorted(p for p in set(extra_pieces) if p not in seen and p not in SPECIALS)
    tokens = list(SPECIALS) + ranked
    if max_size is not None:
        tokens = tokens[: max(max_size, len(SPECIALS))]
    return Vocabulary(tokens)


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match split of one word; ``[UNK]`` if it cannot be covered."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    pieces: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            found = vocab.lookup(piece)
            if found is not None:
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> tuple[list[int], list[bool]]:
    """Token ids plus a flag per id marking the first piece of each word."""
    ids: list[int] = []
    starts: list[bool] = []
    for word in text.split():
        pieces = wordpiece(word, vocab)
        ids.extend(pieces)
        starts.extend([True] + [False] * (len(pieces) - 1))
    return ids, starts


def detokenize(ids: Sequence[int], starts: Sequence[bool], vocab: Vocabulary) -> list[str]:
    words: list[str] = []
    for i, s in zip(ids, starts):
        tok = vocab.id_to_token[i]
        if s:
            words.append(tok)
        else:
            words[-1] += tok[len(CONTINUATION):] if tok.startswith(CONTINUATION) else tok
    return words


@dataclass(frozen=True)
class Example:
    """One tokenized instance. Labels live alongside it, never inside."""

    uid: int
    segment_a: tuple[int, ...]
    segment_b: tuple[int, ...] | None = None
    word_starts: tuple[bool, ...] = ()

    def input_ids(self) -> list[int]:
        ids = [CLS_ID, *self.segment_a, SEP_ID]
        if self.segment_b is not None:
            ids += [*self.segment_b, SEP_ID]
        return ids

    def first_piece_positions(self) -> list[int]:
        """Positions (in ``input_ids`` coordinates) of each word's first piece in segment a."""
        return [i + 1 for i, s in enumerate(self.word_starts) if s]


Label = Union[int, tuple[int, ...]]
LabeledSet = list[tuple[Example, Label]]
UnlabeledSet = list[Example]


def make_example(
    uid: int,
    text_a: str,
    vocab: Vocabulary,
    text_b: str | None = None,
    max_len: int = 64,
) -> Example:
    """Tokenize and truncate from the right; pairs lose tokens from the longer side first."""
    a, sa = tokenize(text_a, vocab)
    if text_b is None:
        budget = max_len - 2
        if budget < 1:
            raise ConfigError("max_len too small for a single segment")
        return Example(uid, tuple(a[:budget]), None, tuple(sa[:budget]))
    b, _ = tokenize(text_b, vocab)
    budget = max_len - 3
    if budget < 2:
        raise ConfigError("max_len too small for a segment pair")
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return Example(uid, tuple(a), tuple(b), tuple(sa[: len(a)]))


def _require(record: dict, key: str, kind: type, lineno: int, path: str):
    if key not in record:
        raise ParseError(f"missing field {key!r}", lineno, path)
    value = record[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"field {key!r} has the wrong type", lineno, path)
    return value


def _parse_record(record: Any, uid: int, task: TaskKind, vocab: Vocabulary, max_len: int, lineno: int, path: str):
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object", lineno, path)
    k = task.num_classes
    if task.kind == SINGLE:
        text = _require(record, "text", str, lineno, path)
        label = _require(record, "label", int, lineno, path)
        if not 0 <= label < k:
            raise DataError(f"{path}:line {lineno}: label {label} outside [0, {k})")
        return make_example(uid, text, vocab, max_len=max_len), label
    if task.kind == PAIR:
        a = _require(record, "text_a", str, lineno, path)
        b = _require(record, "text_b", str, lineno, path)
        label = _require(record, "label", int, lineno, path)
        if not 0 <= label < k:
            raise DataError(f"{path}:line {lineno}: label {label} outside [0, {k})")
        return make_example(uid, a, vocab, b, max_len=max_len), label
    if task.kind == TAGGING:
        tokens = _require(record, "tokens", list, lineno, path)
        tags = _require(record, "tags", list, lineno, path)
        if len(tokens) != len(tags):
            raise DataError(f"{path}:line {lineno}: {len(tokens)} tokens but {len(tags)} tags")
        if not all(isinstance(t, str) and t and not t.isspace() and len(t.split()) == 1 for t in tokens):
            raise ParseError("tokens must be non-empty strings without whitespace", lineno, path)
        for t in tags:
            if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t < k:
                raise DataError(f"{path}:line {lineno}: tag {t!r} outside [0, {k})")
        ex = make_example(uid, " ".join(tokens), vocab, max_len=max_len)
        kept = sum(ex.word_starts)
        return ex, tuple(tags[:kept])
    text = _require(record, "text", str, lineno, path)
    labels = _require(record, "labels", list, lineno, path)
    for t in labels:
        if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t < k:
            raise DataError(f"{path}:line {lineno}: label {t!r} outside [0, {k})")
    return make_example(uid, text, vocab, max_len=max_len), tuple(sorted(set(labels)))


def parse_records(
    records: Iterable[Any], task: TaskKind, vocab: Vocabulary, max_len: int = 64, path: str = "<records>", uid_offset: int = 0
) -> LabeledSet:
    return [
        _parse_record(r, uid_offset + i, task, vocab, max_len, i + 1, path) for i, r in enumerate(records)
    ]


def load_dataset(path: str | Path, task: TaskKind, vocab: Vocabulary, max_len: int = 64, uid_offset: int = 0) -> LabeledSet:
    """Read a JSON Lines file into ``(Example, label)`` pairs, in file order."""
    out: LabeledSet = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno, str(path)) from None
            out.append(_parse_record(record, uid_offset + len(out), task, vocab, max_len, lineno, str(path)))
    return out


def load_unlabeled(path: str | Path, task: TaskKind, vocab: Vocabulary, max_len: int = 64, uid_offset: int = 0) -> UnlabeledSet:
    """Examples from a JSON Lines file; any label fields present are ignored."""
    text_keys = {PAIR: ("text_a", "text_b"), TAGGING: ("tokens",)}.get(task.kind, ("text",))
    out: UnlabeledSet = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno, str(path)) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", lineno, str(path))
            kind = list if task.kind == TAGGING else str
            fields_ = [_require(rec, k, kind, lineno, str(path)) for k in text_keys]
            uid = uid_offset + len(out)
            if task.kind == TAGGING:
                out.append(make_example(uid, " ".join(map(str, fields_[0])), vocab, max_len=max_len))
            else:
                out.append(make_example(uid, fields_[0], vocab, fields_[1] if len(fields_) > 1 else None, max_len))
    return out


def read_texts(path: str | Path) -> list[str]:
    """Every text field of a JSON Lines dataset file, used for vocabularies and TAPT corpora."""
    texts: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno, str(path)) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", lineno, str(path))
            for key in ("text", "text_a", "text_b"):
                if isinstance(rec.get(key), str):
                    texts.append(rec[key])
            if isinstance(rec.get("tokens"), list):
                texts.append(" ".join(map(str, rec["tokens"])))
    return texts


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_split(dataset: LabeledSet, labeled_ratio: float, seed: int) -> tuple[LabeledSet, UnlabeledSet]:
    """Random labeled/unlabeled partition with at least one labeled example per class.

    Stratification only applies to single-label datasets and only when the
    labeled budget covers every class. Both halves keep dataset order.
    """
    if not 0 < labeled_ratio < 1:
        raise ConfigError(f"labeled_ratio must be in (0, 1), got {labeled_ratio}")
    n = len(dataset)
    n_lab = round_half_up(labeled_ratio * n)
    if n_lab == 0:
        raise ConfigError(f"labeled_ratio {labeled_ratio} yields no labeled examples out of {n}")
    if n_lab >= n:
        raise ConfigError(f"labeled_ratio {labeled_ratio} leaves no unlabeled examples out of {n}")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    if all(isinstance(lab, int) for _, lab in dataset):
        by_class: dict[int, list[int]] = {}
        for i, (_, lab) in enumerate(dataset):
            by_class.setdefault(lab, []).append(i)
        if len(by_class) <= n_lab:
            for c in sorted(by_class):
                members = by_class[c]
                chosen.append(members[int(rng.integers(len(members)))])
    taken = set(chosen)
    rest = [i for i in rng.permutation(n).tolist() if i not in taken]
    chosen += rest[: n_lab - len(chosen)]
    keep = set(chosen)
    labeled = [dataset[i] for i in sorted(keep)]
    unlabeled = [dataset[i][0] for i in range(n) if i not in keep]
    return labeled, unlabeled


def holdout(labeled: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Carve a dev set off a labeled set; keeps at least one training example."""
    n_dev = min(max(1, round_half_up(fraction * len(labeled))), len(labeled) - 1)
    if n_dev < 1:
        raise ConfigError("labeled set too small to hold out a dev set")
    rng = np.random.default_rng(seed)
    dev_idx = set(rng.permutation(len(labeled))[:n_dev].tolist())
    train = [x for i, x in enumerate(labeled) if i not in dev_idx]
    dev = [x for i, x in enumerate(labeled) if i in dev_idx]
    return train, dev


# synthetic corpora


@dataclass(frozen=True)
class SyntheticSpec:
    """Topic-style corpus: each class owns a disjoint set of signal words.

    ``vocab_size`` counts the whole vocabulary including the five specials.
    """

    vocab_size: int = 200
    num_classes: int = 2
    min_len: int = 8
    max_len: int = 16
    num_examples: int = 5000
    noise_rate: float = 0.1
    seed: int = 0
    signal_per_class: int = 40
    signal_tokens: int = 4
    dev_examples: int = 0
    test_examples: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("synthetic corpus needs at least 2 classes")
        if not 0 <= self.noise_rate <= 1:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 1 <= self.signal_tokens <= self.min_len:
            raise ConfigError("signal_tokens must lie in [1, min_len]")
        if self.num_examples < 1:
            raise ConfigError("num_examples must be positive")
        words = self.vocab_size - len(SPECIALS)
        if self.signal_per_class < 1 or words < self.num_classes * self.signal_per_class + 1:
            raise ConfigError(
                f"vocab_size {self.vocab_size} cannot hold {self.num_classes} disjoint signal sets "
                f"of {self.signal_per_class} words plus background words"
            )


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    vocab: Vocabulary
    signal_words: list[list[str]]
    background_words: list[str]
    records: list[dict] = field(default_factory=list)
    clean_labels: list[int] = field(default_factory=list)
    dev_records: list[dict] = field(default_factory=list)
    test_records: list[dict] = field(default_factory=list)

    def bayes_label(self, text: str) -> int:
        """Class whose signal words occur most often in ``text`` (lowest index on ties)."""
        counts = [sum(w in set(ws) for w in text.split()) for ws in self.signal_words]
        return int(np.argmax(counts))


def _synth_records(spec: SyntheticSpec, signal, background, n, rng) -> tuple[list[dict], list[int]]:
    records, clean = [], []
    k = spec.num_classes
    for _ in range(n):
        y = int(rng.integers(k))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        words = [signal[y][j] for j in rng.integers(len(signal[y]), size=spec.signal_tokens)]
        words += [background[j] for j in rng.integers(len(background), size=length - spec.signal_tokens)]
        order = rng.permutation(length)
        text = " ".join(words[j] for j in order)
        label = y
        if spec.noise_rate > 0 and rng.random() < spec.noise_rate:
            label = int(rng.integers(k))
        records.append({"text": text, "label": label})
        clean.append(y)
    return records, clean


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticCorpus:
    """Deterministic labeled corpus plus optional dev/test splits from the same process.

    Noisy labels are resampled uniformly over all classes, so the expected
    fraction of changed labels is ``noise_rate * (K - 1) / K``.
    """
    spec.validate()
    n_words = spec.vocab_size - len(SPECIALS)
    names = [f"w{i:03d}" for i in range(n_words)]
    rng = np.random.default_rng(spec.seed)
    perm = [names[i] for i in rng.permutation(n_words)]
    signal = [perm[c * spec.signal_per_class : (c + 1) * spec.signal_per_class] for c in range(spec.num_classes)]
    background = perm[spec.num_classes * spec.signal_per_class :]
    vocab = Vocabulary(list(SPECIALS) + names)
    corpus = SyntheticCorpus(spec, vocab, signal, background)
    corpus.records, corpus.clean_labels = _synth_records(spec, signal, background, spec.num_examples, rng)
    if spec.dev_examples:
        corpus.dev_records, _ = _synth_records(spec, signal, background, spec.dev_examples, rng)
    if spec.test_examples:
        corpus.test_records, _ = _synth_records(spec, signal, background, spec.test_examples, rng)
    return corpus
