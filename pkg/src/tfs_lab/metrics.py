"""Task metrics, run aggregation and the additive TAPT+ST reference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import MetricError


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    split: str = "test"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise MetricError(f"{self.name}={self.value} outside [0, 1]")

    def __float__(self) -> float:
        return self.value


def _same_length(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise MetricError(f"length mismatch: {len(a)} predictions vs {len(b)} gold")
    if not a:
        raise MetricError("metric over empty inputs")


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """F1 with the 0/0 cases defined as 0.

    Uses 2TP / (2TP + FP + FN), equal to 2PR / (P + R) but a single
    correctly rounded division.
    """
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def accuracy(predictions: Sequence[int], gold: Sequence[int], split: str = "test") -> MetricValue:
    _same_length(predictions, gold)
    hits = sum(int(p == g) for p, g in zip(predictions, gold))
    return MetricValue("accuracy", hits / len(gold), split)


def binary_f1(predictions: Sequence[int], gold: Sequence[int], positive_class: int = 1, split: str = "test") -> MetricValue:
    _same_length(predictions, gold)
    if any(v not in (0, 1) for v in (*predictions, *gold)):
        raise MetricError("binary_f1 expects labels in {0, 1}")
    tp = sum(p == positive_class and g == positive_class for p, g in zip(predictions, gold))
    fp = sum(p == positive_class and g != positive_class for p, g in zip(predictions, gold))
    fn = sum(p != positive_class and g == positive_class for p, g in zip(predictions, gold))
    return MetricValue("binary_f1", f1_from_counts(tp, fp, fn), split)


def bio_tag_names(num_tags: int) -> list[str]:
    """Default index convention: 0 = O, then B-Tj = 1 + 2j and I-Tj = 2 + 2j."""
    names = ["O"]
    for j in range((num_tags - 1) // 2):
        names += [f"B-T{j}", f"I-T{j}"]
    return names


def _decode(tags: Sequence, tag_names: Sequence[str] | None) -> list[str]:
    out = []
    for t in tags:
        if isinstance(t, str):
            out.append(t)
            continue
        if tag_names is None or not 0 <= t < len(tag_names):
            raise MetricError(f"invalid tag index {t!r}")
        out.append(tag_names[t])
    return out


def bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans ``(type, start, end)`` with inclusive ends.

    An ``I-X`` that does not continue an open ``X`` span starts a new one.
    """
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(tags):
        if tag == "O":
            prefix, label = "O", None
        elif len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
            prefix, label = tag[0], tag[2:]
        else:
            raise MetricError(f"invalid BIO tag {tag!r}")
        continues = prefix == "I" and kind == label and start is not None
        if not continues and start is not None:
            spans.add((kind, start, i - 1))
            start, kind = None, None
        if prefix in "BI" and not continues:
            start, kind = i, label
    if start is not None:
        spans.add((kind, start, len(tags) - 1))
    return spans


def span_f1(
    predicted: Sequence[Sequence],
    gold: Sequence[Sequence],
    tag_names: Sequence[str] | None = None,
    num_tags: int | None = None,
    split: str = "test",
) -> MetricValue:
    """Entity-level exact-match F1 pooled over sentences."""
    _same_length(predicted, gold)
    if tag_names is None and num_tags is not None:
        tag_names = bio_tag_names(num_tags)
    tp = fp = fn = 0
    for p_seq, g_seq in zip(predicted, gold):
        if len(p_seq) != len(g_seq):
            raise MetricError("predicted and gold tag sequences differ in length")
        ps = bio_spans(_decode(p_seq, tag_names))
        gs = bio_spans(_decode(g_seq, tag_names))
        tp += len(ps & gs)
        fp += len(ps - gs)
        fn += len(gs - ps)
    return MetricValue("span_f1", f1_from_counts(tp, fp, fn), split)


def micro_f1(predicted: Sequence[Iterable[int]], gold: Sequence[Iterable[int]], num_classes: int, split: str = "test") -> MetricValue:
    _same_length(predicted, gold)
    tp = fp = fn = 0
    for p_set, g_set in zip(predicted, gold):
        p_set, g_set = set(p_set), set(g_set)
        if any(not 0 <= c < num_classes for c in p_set | g_set):
            raise MetricError(f"label outside [0, {num_classes})")
        tp += len(p_set & g_set)
        fp += len(p_set - g_set)
        fn += len(g_set - p_set)
    return MetricValue("micro_f1", f1_from_counts(tp, fp, fn), split)


@dataclass
class AggregateResult:
    regime: str
    mean: float
    std: float
    values: list[float] = field(default_factory=list)
    metric: str = ""
    gain: float | None = None


def aggregate(values: Sequence[float], regime: str = "", metric: str = "") -> AggregateResult:
    """Arithmetic mean and population standard deviation."""
    values = [float(v) for v in values]
    if not values:
        raise MetricError("cannot aggregate zero runs")
    m = math.fsum(values) / len(values)
    var = math.fsum((v - m) ** 2 for v in values) / len(values)
    return AggregateResult(regime, m, math.sqrt(var), values, metric)


def additive_reference(ft: AggregateResult, tapt: AggregateResult, st: AggregateResult) -> float:
    """FT plus the TAPT gain plus the ST gain."""
    metrics = {r.metric for r in (ft, tapt, st)}
    if len(metrics) > 1:
        raise MetricError(f"cannot combine different metrics: {sorted(metrics)}")
    return ft.mean + (tapt.mean - ft.mean) + (st.mean - ft.mean)
