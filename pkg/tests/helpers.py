"""Tiny models and batches shared by the test modules."""

import numpy as np

from tfs_lab.model import MLM, EncoderConfig, Model, init_model
from tfs_lab.text import MULTI_LABEL, PAIR, SINGLE, TAGGING, Example, TaskKind

TINY_VOCAB = 12
NUM_CLASSES = {SINGLE: 3, PAIR: 2, TAGGING: 5, MULTI_LABEL: 4}


def tiny_config(dropout=0.0):
    return EncoderConfig(vocab_size=TINY_VOCAB, hidden_size=4, num_layers=1, num_heads=2, ff_size=8,
                         max_positions=8, dropout=dropout)


def tiny_model(seed, kinds=(SINGLE, PAIR, TAGGING, MULTI_LABEL, MLM), dtype=np.float64):
    """Float64 model with every head; weights scaled up so gradients are not vanishingly small."""
    ck = init_model(tiny_config(), {k: NUM_CLASSES.get(k, 0) for k in kinds}, seed=seed)
    m = Model(ck, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, t in m.params.items():
        t.data = t.data + rng.normal(0, 0.3, size=t.shape).astype(t.dtype)
    return m


def tiny_examples(kind, rng, n=3):
    out = []
    for i in range(n):
        length = int(rng.integers(2, 5))
        ids = tuple(int(x) for x in rng.integers(5, TINY_VOCAB, size=length))
        if kind == PAIR:
            seg_b = tuple(int(x) for x in rng.integers(5, TINY_VOCAB, size=2))
            out.append(Example(i, ids[:3], seg_b, (True,) * len(ids[:3])))
        elif kind == TAGGING:
            starts = (True,) + tuple(bool(b) for b in rng.integers(0, 2, size=length - 1))
            out.append(Example(i, ids, None, starts))
        else:
            out.append(Example(i, ids, None, (True,) * length))
    return out


def tiny_labels(kind, examples, rng):
    k = NUM_CLASSES[kind]
    if kind == TAGGING:
        return [tuple(int(x) for x in rng.integers(k, size=sum(ex.word_starts))) for ex in examples]
    if kind == MULTI_LABEL:
        return [tuple(sorted(set(int(x) for x in rng.integers(k, size=2)))) for _ in examples]
    return [int(x) for x in rng.integers(k, size=len(examples))]


def tiny_task(kind):
    return TaskKind(kind, NUM_CLASSES[kind])
