"""Training phases and the five compared regimes: FT, TAPT, ST, STTI and TFS.

Every phase takes an immutable checkpoint and returns a new one, so a
teacher can never be modified by the student it trains. Phase randomness
comes from explicit seeds derived with :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .autograd import Adam
from .errors import ConfigError, ProtocolError
from .model import MLM, Model, ModelCheckpoint, collate
from .objectives import (
    PseudoLabeledSet,
    apply_dynamic_mask,
    mlm_loss,
    st_loss,
    supervised_loss,
)
from .text import MULTI_LABEL, TAGGING, Example, LabeledSet, TaskKind, UnlabeledSet

REGIMES = ("FT", "TAPT", "ST", "STTI", "TFS")

# Init. / Pseud. rows of the comparison table
REGIME_LINEAGE = {
    "FT": ("base", "-"),
    "TAPT": ("TAPT*", "-"),
    "ST": ("base", "FT"),
    "STTI": ("TAPT*", "FT"),
    "TFS": ("TAPT*", "TAPT"),
}

LogFn = Callable[[dict], None]


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).hexdigest()
    return int(digest[:15], 16)


@dataclass
class RegimeConfig:
    regime: str = "TFS"
    tapt_epochs: int = 10
    finetune_epochs: int = 20
    st_epochs_per_round: int = 1
    max_rounds: int = 3
    batch_size: int = 16
    pseudo_batch_size: int = 32
    tapt_batch_size: int = 32
    eval_batch_size: int = 256
    lr: float = 1e-3
    tapt_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    mask_prob: float = 0.15
    # None weights the two terms by set size, |D_u| / |D_l|, so the mean-based
    # st_loss matches the summed objective over the combined labeled + pseudo set
    unlabeled_weight: float | None = None
    patience: int = 1
    select_best_epoch: bool = True
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        for name in ("tapt_epochs", "finetune_epochs", "st_epochs_per_round", "max_rounds"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        for name in ("batch_size", "pseudo_batch_size", "tapt_batch_size", "eval_batch_size", "patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("lr", "tapt_lr", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must lie in (0, 1)")
        if self.unlabeled_weight is not None and self.unlabeled_weight < 0:
            raise ConfigError("unlabeled_weight must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown regime config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer(self, model: Model, lr: float | None = None) -> Adam:
        return Adam(model.parameters(), lr or self.lr, self.beta1, self.beta2, self.eps, self.grad_clip)

    def finetune_key(self) -> str:
        """Fields that determine a finetuning run; regimes sharing them share teachers."""
        d = asdict(self)
        for k in ("regime", "st_epochs_per_round", "max_rounds", "pseudo_batch_size", "unlabeled_weight", "patience"):
            d.pop(k)
        return repr(sorted(d.items()))


@dataclass
class RoundLog:
    round: int
    teacher_id: str
    student_id: str
    pseudo_agreement: float | None
    dev_metric: float | None
    train_losses: list[float] = field(default_factory=list)
    teacher_unchanged: bool = True


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _emit(log: LogFn | None, record: dict) -> None:
    if log is not None:
        log(record)


# inference


def predict_distributions(
    ckpt: ModelCheckpoint | Model, examples: Sequence[Example], task: TaskKind, batch_size: int = 256
) -> list[np.ndarray]:
    """Per-example class probabilities in inference mode (no dropout)."""
    model = ckpt if isinstance(ckpt, Model) else Model(ckpt)
    if not model.has_head(task.kind):
        raise ProtocolError(f"model has no {task.kind} head")
    out: list[np.ndarray] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk)
        scores = model.head_forward(task.kind, model.encode(batch, train_mode=False)).data.astype(np.float64)
        if task.kind == MULTI_LABEL:
            probs = 1.0 / (1.0 + np.exp(-scores))
            out.extend(probs)
            continue
        probs = np.exp(scores - scores.max(-1, keepdims=True))
        probs /= probs.sum(-1, keepdims=True)
        if task.kind == TAGGING:
            out.extend(probs[i, : batch.lengths[i]] for i in range(len(chunk)))
        else:
            out.extend(probs)
    return out


def decode_predictions(dists: Sequence[np.ndarray], examples: Sequence[Example], task: TaskKind, threshold: float = 0.5) -> list:
    if task.kind == MULTI_LABEL:
        return [tuple(np.flatnonzero(d >= threshold).tolist()) for d in dists]
    if task.kind == TAGGING:
        return [tuple(d[ex.first_piece_positions()].argmax(-1).tolist()) for d, ex in zip(dists, examples)]
    return [int(d.argmax()) for d in dists]


def score(task: TaskKind, predictions: Sequence, gold: Sequence, split: str = "test") -> metrics.MetricValue:
    if task.metric == "accuracy":
        return metrics.accuracy(predictions, gold, split)
    if task.metric == "binary_f1":
        return metrics.binary_f1(predictions, gold, 1, split)
    if task.metric == "span_f1":
        return metrics.span_f1(predictions, gold, num_tags=task.num_classes, split=split)
    return metrics.micro_f1(predictions, gold, task.num_classes, split)


def evaluate(
    ckpt: ModelCheckpoint | Model, data: LabeledSet, task: TaskKind, batch_size: int = 256, threshold: float = 0.5, split: str = "test"
) -> float:
    examples = [ex for ex, _ in data]
    dists = predict_distributions(ckpt, examples, task, batch_size)
    return score(task, decode_predictions(dists, examples, task, threshold), [lab for _, lab in data], split).value


# phases


def run_tapt(
    init: ModelCheckpoint,
    corpus: Sequence[Example],
    config: RegimeConfig,
    seed: int | None = None,
    log: LogFn | None = None,
) -> ModelCheckpoint:
    """Continue MLM training on the task's own texts with fresh masks every epoch."""
    if not corpus:
        raise ProtocolError("TAPT needs a non-empty corpus")
    seed = config.seed if seed is None else seed
    start = init.with_head(MLM, 0, seed)
    model = Model(start)
    opt = config.optimizer(model, config.tapt_lr)
    rng = np.random.default_rng(seed)
    for epoch in range(config.tapt_epochs):
        losses = []
        for idx in _batches(len(corpus), config.tapt_batch_size, rng):
            masked = apply_dynamic_mask([corpus[i] for i in idx], config.mask_prob, rng)
            loss = mlm_loss(model, masked, train_mode=True, rng=rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        _emit(log, {"phase": "tapt", "epoch": epoch + 1, "mlm_loss": float(np.mean(losses))})
    return model.snapshot("tapt", (*init.lineage, init.provenance), seed)


def _fit(
    model: Model,
    step_fn: Callable[[np.random.Generator], list[float]],
    epochs: int,
    rng: np.random.Generator,
    opt: Adam,
    dev: LabeledSet | None,
    task: TaskKind,
    config: RegimeConfig,
    phase: str,
    log: LogFn | None,
    extra: dict | None = None,
) -> tuple[float | None, list[float]]:
    """Epoch loop with optional best-on-dev parameter selection. Returns (dev metric, epoch losses)."""
    best_metric, best_state = None, None
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        losses = step_fn(rng)
        epoch_losses.append(float(np.mean(losses)))
        record = {"phase": phase, "epoch": epoch + 1, "loss": epoch_losses[-1], **(extra or {})}
        if dev:
            metric = evaluate(model, dev, task, config.eval_batch_size, config.threshold, "dev")
            record["dev_metric"] = metric
            if best_metric is None or metric > best_metric:
                best_metric = metric
                best_state = {k: t.data.copy() for k, t in model.params.items()}
        _emit(log, record)
    if config.select_best_epoch and best_state is not None:
        for k, arr in best_state.items():
            model.params[k].data = arr
    elif dev and epochs:
        best_metric = evaluate(model, dev, task, config.eval_batch_size, config.threshold, "dev")
    return best_metric, epoch_losses


def run_finetune(
    init: ModelCheckpoint,
    labeled: LabeledSet,
    task: TaskKind,
    config: RegimeConfig,
    dev: LabeledSet | None = None,
    seed: int | None = None,
    log: LogFn | None = None,
) -> ModelCheckpoint:
    """Supervised training on the labeled set; attaches a fresh task head when missing."""
    if not labeled:
        raise ProtocolError("finetuning needs a non-empty labeled set")
    seed = config.seed if seed is None else seed
    model = Model(init.with_head(task.kind, task.num_classes, seed))
    opt = config.optimizer(model)

    def epoch(rng):
        losses = []
        for idx in _batches(len(labeled), config.batch_size, rng):
            loss = supervised_loss(model, task, [labeled[i] for i in idx], train_mode=True, rng=rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    _fit(model, epoch, config.finetune_epochs, np.random.default_rng(seed), opt, dev, task, config, "finetune", log,
         {"init": init.path})
    return model.snapshot("finetuned", (*init.lineage, init.provenance), seed)


def generate_pseudo_labels(
    teacher: ModelCheckpoint, unlabeled: UnlabeledSet, task: TaskKind, batch_size: int = 256
) -> PseudoLabeledSet:
    """Soft labels for every unlabeled example, recomputed from the given teacher."""
    if not teacher.has_head(task.kind):
        raise ProtocolError(f"teacher has no {task.kind} head")
    dists = predict_distributions(teacher, unlabeled, task, batch_size)
    pseudo = PseudoLabeledSet(task, list(zip(unlabeled, dists)), teacher.checkpoint_id)
    pseudo.validate()
    return pseudo


def _train_student(
    init: ModelCheckpoint,
    labeled: LabeledSet,
    pseudo: PseudoLabeledSet,
    task: TaskKind,
    config: RegimeConfig,
    dev: LabeledSet | None,
    seed: int,
    round_index: int,
    log: LogFn | None,
) -> tuple[Model, float | None, list[float]]:
    model = Model(init)
    opt = config.optimizer(model)
    lab_order: list[int] = []
    weight = config.unlabeled_weight
    if weight is None:
        weight = len(pseudo) / len(labeled)

    def next_labeled(rng) -> list:
        nonlocal lab_order
        picked = []
        while len(picked) < min(config.batch_size, len(labeled)):
            if not lab_order:
                lab_order = rng.permutation(len(labeled)).tolist()
            picked.append(lab_order.pop())
        return [labeled[i] for i in picked]

    def epoch(rng):
        losses = []
        for idx in _batches(len(pseudo), config.pseudo_batch_size, rng):
            loss = st_loss(model, task, next_labeled(rng), pseudo.subset(idx), weight, True, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    metric, losses = _fit(model, epoch, config.st_epochs_per_round, np.random.default_rng(seed), opt, dev, task,
                          config, "self_train", log, {"round": round_index})
    return model, metric, losses


def run_self_training(
    teacher: ModelCheckpoint,
    student_init: ModelCheckpoint,
    labeled: LabeledSet,
    unlabeled: UnlabeledSet,
    task: TaskKind,
    config: RegimeConfig,
    dev: LabeledSet | None = None,
    seed: int | None = None,
    log: LogFn | None = None,
) -> tuple[ModelCheckpoint, list[RoundLog]]:
    """Iterative teacher/student rounds.

    Round 1 starts the student from ``student_init``; later rounds start it
    from the current teacher (the previous student). Stops after
    ``max_rounds`` or once the dev metric has not improved for ``patience``
    consecutive rounds, returning the best student on dev (the last one when
    there is no dev set).
    """
    if not unlabeled:
        raise ProtocolError("self-training needs a non-empty unlabeled set")
    if not labeled:
        raise ProtocolError("self-training needs a non-empty labeled set")
    if not teacher.has_head(task.kind):
        raise ProtocolError(f"teacher has no {task.kind} head")
    seed = config.seed if seed is None else seed
    rounds: list[RoundLog] = []
    current = teacher
    best, best_metric, stale = teacher, None, 0
    prev_hard = None
    for r in range(1, config.max_rounds + 1):
        teacher_id = current.checkpoint_id
        pseudo = generate_pseudo_labels(current, unlabeled, task, config.eval_batch_size)
        hard = pseudo.hard_labels()
        agreement = None if prev_hard is None else float(np.mean([a == b for a, b in zip(hard, prev_hard)]))
        prev_hard = hard
        base = student_init if r == 1 else current
        round_seed = derive_seed(seed, "round", r)
        init = base.with_head(task.kind, task.num_classes, round_seed)
        model, metric, losses = _train_student(init, labeled, pseudo, task, config, dev, round_seed, r, log)
        student = model.snapshot(f"student_round_{r}", (*init.lineage, init.provenance), round_seed, current.path)
        # hash recomputed from the teacher's parameters after the student trained
        log_entry = RoundLog(r, teacher_id, student.checkpoint_id, agreement, metric, losses,
                             current.checkpoint_id == teacher_id)
        rounds.append(log_entry)
        _emit(log, {"phase": "round", **asdict(log_entry)})
        if metric is None:
            best = student
        elif best_metric is None or metric > best_metric:
            best, best_metric, stale = student, metric, 0
        else:
            stale += 1
        current = student
        if stale >= config.patience:
            break
    return best, rounds


# regimes


@dataclass
class RegimeData:
    task: TaskKind
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    dev: LabeledSet
    test: LabeledSet
    base: ModelCheckpoint
    tapt: ModelCheckpoint | None = None

    def tapt_corpus(self) -> list[Example]:
        return [ex for ex, _ in self.labeled] + list(self.unlabeled)


@dataclass
class RunResult:
    regime: str
    metric: str
    dev: float | None
    test: float | None
    checkpoint_id: str
    lineage: str
    pseudo_labeler: str | None
    seed: int
    rounds: list[RoundLog] = field(default_factory=list)
    key: dict = field(default_factory=dict)
    checkpoint: ModelCheckpoint | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        d = asdict(self)
        d.pop("checkpoint")
        return d

    @classmethod
    def from_record(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["rounds"] = [RoundLog(**r) for r in d.get("rounds", [])]
        return cls(**d)


def ensure_tapt(data: RegimeData, config: RegimeConfig, log: LogFn | None = None) -> ModelCheckpoint:
    if data.tapt is None:
        data.tapt = run_tapt(data.base, data.tapt_corpus(), config, derive_seed(config.seed, "tapt"), log)
    return data.tapt


def run_regime(
    regime: str,
    data: RegimeData,
    config: RegimeConfig,
    cache: dict | None = None,
    log: LogFn | None = None,
) -> RunResult:
    """Run one regime end to end and score it on dev and test.

    FT finetunes the base checkpoint; TAPT finetunes the TAPT checkpoint; ST,
    STTI and TFS self-train with teachers and round-1 students:

        ST    teacher FT,             student starts from base
        STTI  teacher FT,             student starts from TAPT
        TFS   teacher TAPT-finetuned, student starts from TAPT

    ``cache`` shares finetuned teachers between regimes of the same run.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    cache = {} if cache is None else cache
    task = data.task
    dev = data.dev or None

    def finetuned(init: ModelCheckpoint) -> ModelCheckpoint:
        key = ("finetune", init.checkpoint_id, config.seed, config.finetune_key())
        if key not in cache:
            seed = derive_seed(config.seed, "finetune", init.path)
            cache[key] = run_finetune(init, data.labeled, task, config, dev, seed, log)
        return cache[key]

    rounds: list[RoundLog] = []
    if regime == "FT":
        final = finetuned(data.base)
    elif regime == "TAPT":
        final = finetuned(ensure_tapt(data, config, log))
    else:
        if regime == "ST":
            teacher, student_init = finetuned(data.base), data.base
        elif regime == "STTI":
            teacher, student_init = finetuned(data.base), ensure_tapt(data, config, log)
        else:
            tapt = ensure_tapt(data, config, log)
            teacher, student_init = finetuned(tapt), tapt
        if config.max_rounds == 0:
            final = teacher
        else:
            st_seed = derive_seed(config.seed, "selftrain", regime)
            final, rounds = run_self_training(teacher, student_init, data.labeled, data.unlabeled, task, config, dev,
                                              st_seed, log)
    dev_metric = evaluate(final, data.dev, task, config.eval_batch_size, config.threshold, "dev") if data.dev else None
    test_metric = evaluate(final, data.test, task, config.eval_batch_size, config.threshold) if data.test else None
    return RunResult(regime, task.metric, dev_metric, test_metric, final.checkpoint_id, final.path,
                     final.pseudo_labeler, config.seed, rounds, checkpoint=final)

