"""Small post-LN transformer encoder, task heads and the on-disk checkpoint format.

Checkpoints are immutable snapshots (``ModelCheckpoint``); training happens
on a ``Model``, which holds live parameter tensors and is created from a
checkpoint and turned back into one with ``Model.snapshot``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CheckpointError, ConfigError, DataError, ModelError
from .text import PAD_ID, TASK_KINDS, TAGGING, Example

FORMAT_VERSION = 1
MLM = "mlm"
HEAD_KINDS = (*TASK_KINDS, MLM)
INIT_STD = 0.02
_NEG = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ff_size: int = 128
    max_positions: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        dims = (self.vocab_size, self.hidden_size, self.num_layers, self.num_heads, self.ff_size, self.max_positions)
        if any(not isinstance(d, int) or d <= 0 for d in dims):
            raise ConfigError(f"encoder dimensions must be positive integers: {self}")
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


def _truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def _encoder_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    i, f = cfg.hidden_size, cfg.ff_size
    shapes = [
        ("embeddings.token", (cfg.vocab_size, i), "w"),
        ("embeddings.position", (cfg.max_positions, i), "w"),
        ("embeddings.norm.gain", (i,), "one"),
        ("embeddings.norm.bias", (i,), "zero"),
    ]
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        for proj in ("query", "key", "value", "output"):
            shapes += [(p + f"attn.{proj}.weight", (i, i), "w"), (p + f"attn.{proj}.bias", (i,), "zero")]
        shapes += [(p + "attn_norm.gain", (i,), "one"), (p + "attn_norm.bias", (i,), "zero")]
        shapes += [
            (p + "ffn.in.weight", (i, f), "w"),
            (p + "ffn.in.bias", (f,), "zero"),
            (p + "ffn.out.weight", (f, i), "w"),
            (p + "ffn.out.bias", (i,), "zero"),
            (p + "ffn_norm.gain", (i,), "one"),
            (p + "ffn_norm.bias", (i,), "zero"),
        ]
    return shapes


def _head_shapes(cfg: EncoderConfig, kind: str, num_classes: int) -> list[tuple[str, tuple[int, ...], str]]:
    if kind == MLM:
        return [("heads.mlm.bias", (cfg.vocab_size,), "zero")]
    return [
        (f"heads.{kind}.weight", (num_classes, cfg.hidden_size), "w"),
        (f"heads.{kind}.bias", (num_classes,), "zero"),
    ]


def _materialize(shapes, rng) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, how in shapes:
        if how == "w":
            out[name] = _truncated_normal(rng, shape)
        elif how == "one":
            out[name] = np.ones(shape, dtype=np.float32)
        else:
            out[name] = np.zeros(shape, dtype=np.float32)
    return out


def _freeze(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    frozen = {}
    for k, v in params.items():
        arr = np.array(v, dtype=np.float32, copy=True)
        arr.flags.writeable = False
        frozen[k] = arr
    return frozen


@dataclass(frozen=True)
class ModelCheckpoint:
    """Immutable parameter snapshot plus provenance.

    ``lineage`` lists the provenance tags of the checkpoints whose parameters
    this one was trained from, oldest first. ``pseudo_labeler`` names the
    teacher (as its lineage path) whose soft labels trained this checkpoint.
    """

    config: EncoderConfig
    params: Mapping[str, np.ndarray]
    provenance: str = "random_init"
    lineage: tuple[str, ...] = ()
    seed: int = 0
    pseudo_labeler: str | None = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "params", _freeze(self.params))

    @property
    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    @property
    def path(self) -> str:
        """Lineage including this checkpoint, e.g. ``random_init>tapt>finetuned``."""
        return ">".join((*self.lineage, self.provenance))

    @property
    def heads(self) -> dict[str, int]:
        out = {}
        for name, arr in self.params.items():
            if name.startswith("heads.") and name.endswith(".bias"):
                kind = name.split(".")[1]
                out[kind] = arr.shape[0]
        return out

    def has_head(self, kind: str) -> bool:
        return f"heads.{kind}.bias" in self.params

    def same_params(self, other: "ModelCheckpoint") -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)

    def with_head(self, kind: str, num_classes: int, seed: int) -> "ModelCheckpoint":
        """Copy with a freshly initialised head of ``kind``; unchanged if the head exists."""
        if kind not in HEAD_KINDS:
            raise ModelError(f"unknown head kind {kind!r}")
        if self.has_head(kind):
            if kind != MLM and self.heads[kind] != num_classes:
                raise ModelError(f"existing {kind} head has {self.heads[kind]} classes, wanted {num_classes}")
            return self
        rng = np.random.default_rng([seed, 7919])
        params = dict(self.params)
        params.update(_materialize(_head_shapes(self.config, kind, num_classes), rng))
        return ModelCheckpoint(self.config, params, self.provenance, self.lineage, self.seed, self.pseudo_labeler)

    def without_heads(self, keep: Sequence[str] = ()) -> "ModelCheckpoint":
        params = {
            k: v for k, v in self.params.items() if not k.startswith("heads.") or k.split(".")[1] in keep
        }
        return ModelCheckpoint(self.config, params, self.provenance, self.lineage, self.seed, self.pseudo_labeler)


def init_model(config: EncoderConfig, heads: Mapping[str, int] | Sequence[str] = (), seed: int = 0) -> ModelCheckpoint:
    """Random checkpoint: truncated-normal(0.02) weights, zero biases, unit norm gains.

    ``heads`` maps head kind to class count; ``mlm`` needs no count.
    """
    if not isinstance(heads, Mapping):
        heads = {h: 0 for h in heads}
    rng = np.random.default_rng(seed)
    params = _materialize(_encoder_shapes(config), rng)
    ckpt = ModelCheckpoint(config, params, "random_init", (), seed)
    for kind, k in heads.items():
        ckpt = ckpt.with_head(kind, k, seed)
    return ckpt


@dataclass
class Batch:
    """Right-padded input ids for a list of examples."""

    ids: np.ndarray  # [B, T] int64
    pad: np.ndarray  # [B, T] bool, True at PAD positions
    lengths: list[int] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


def collate(examples: Sequence[Example] | Sequence[Sequence[int]]) -> Batch:
    seqs = [ex.input_ids() if isinstance(ex, Example) else list(ex) for ex in examples]
    if not seqs:
        raise DataError("cannot collate an empty batch")
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return Batch(ids, ids == PAD_ID, [len(s) for s in seqs])


class Model:
    """Live, trainable view of a checkpoint."""

    def __init__(self, ckpt: ModelCheckpoint, dtype=np.float32):
        self.config = ckpt.config
        self.source = ckpt
        self.params: dict[str, Tensor] = {
            name: ag.parameter(arr, dtype=dtype) for name, arr in ckpt.params.items()
        }
        self.keep_attention = False
        self.attention: list[np.ndarray] = []

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def has_head(self, kind: str) -> bool:
        return f"heads.{kind}.bias" in self.params

    def snapshot(self, provenance: str, lineage: tuple[str, ...], seed: int, pseudo_labeler: str | None = None) -> ModelCheckpoint:
        return ModelCheckpoint(
            self.config, {k: t.data for k, t in self.params.items()}, provenance, lineage, seed, pseudo_labeler
        )

    def load_state(self, ckpt: ModelCheckpoint) -> None:
        for k, arr in ckpt.params.items():
            self.params[k].data = np.array(arr, dtype=self.params[k].dtype, copy=True)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def encode(self, batch: Batch | Sequence[Example], train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states ``[B, T, I]``. PAD keys get zero attention weight."""
        if not isinstance(batch, Batch):
            batch = collate(batch)
        cfg = self.config
        ids = batch.ids
        b, t = ids.shape
        if ids.max() >= cfg.vocab_size or ids.min() < 0:
            raise DataError(f"token id outside [0, {cfg.vocab_size})")
        if t > cfg.max_positions:
            raise DataError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
        rate = cfg.dropout
        x = ag.embedding(self._p("embeddings.token"), ids) + self._p("embeddings.position")[:t]
        x = ag.layer_norm(x, self._p("embeddings.norm.gain"), self._p("embeddings.norm.bias"))
        x = ag.dropout(x, rate, rng, train_mode)
        key_mask = Tensor(np.where(batch.pad, _NEG, 0.0)[:, None, None, :], dtype=x.dtype)
        h, d = cfg.num_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(d)
        self.attention = []
        for layer in range(cfg.num_layers):
            p = f"layers.{layer}."

            def proj(inp, name):
                return inp @ self._p(p + f"attn.{name}.weight") + self._p(p + f"attn.{name}.bias")

            def heads(z):
                return z.reshape(b, t, h, d).transpose(0, 2, 1, 3)

            q, k, v = heads(proj(x, "query")), heads(proj(x, "key")), heads(proj(x, "value"))
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale + key_mask
            probs = ag.softmax(scores, axis=-1)
            if self.keep_attention:
                self.attention.append(probs.data.copy())
            probs = ag.dropout(probs, rate, rng, train_mode)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, h * d)
            attn_out = ag.dropout(proj(ctx, "output"), rate, rng, train_mode)
            x = ag.layer_norm(x + attn_out, self._p(p + "attn_norm.gain"), self._p(p + "attn_norm.bias"))
            ff = ag.gelu(x @ self._p(p + "ffn.in.weight") + self._p(p + "ffn.in.bias"))
            ff = ff @ self._p(p + "ffn.out.weight") + self._p(p + "ffn.out.bias")
            ff = ag.dropout(ff, rate, rng, train_mode)
            x = ag.layer_norm(x + ff, self._p(p + "ffn_norm.gain"), self._p(p + "ffn_norm.bias"))
        return x

    def head_forward(self, kind: str, hidden: Tensor) -> Tensor:
        """Raw scores. Sentence-level heads read position 0 (the CLS vector)."""
        if kind not in HEAD_KINDS:
            raise ModelError(f"unknown head kind {kind!r}")
        if not self.has_head(kind):
            raise ModelError(f"model has no {kind} head")
        if kind == MLM:
            weight = self._p("embeddings.token").transpose(1, 0)
            return hidden @ weight + self._p("heads.mlm.bias")
        weight = self._p(f"heads.{kind}.weight").transpose(1, 0)
        bias = self._p(f"heads.{kind}.bias")
        if kind == TAGGING:
            return hidden @ weight + bias
        return hidden[:, 0, :] @ weight + bias


def _manifest(ckpt: ModelCheckpoint) -> dict:
    return {
        "format_version": ckpt.format_version,
        "config": asdict(ckpt.config),
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.params.items()],
        "provenance": ckpt.provenance,
        "lineage": list(ckpt.lineage),
        "pseudo_labeler": ckpt.pseudo_labeler,
        "seed": ckpt.seed,
        "checkpoint_id": ckpt.checkpoint_id,
    }


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float32, manifest order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "params.bin", "wb") as fh:
        for arr in ckpt.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    (path / "manifest.json").write_text(json.dumps(_manifest(ckpt), indent=2), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        raw = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc.msg}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {manifest.get('format_version')!r} != {FORMAT_VERSION}")
    try:
        config = EncoderConfig(**manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad encoder config in manifest: {exc}") from None
    expected = {n: s for n, s, _ in _encoder_shapes(config)}
    data = np.frombuffer(raw, dtype="<f4")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["parameters"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in expected and expected[name] != shape:
            raise CheckpointError(f"{name}: manifest shape {shape} disagrees with config {expected[name]}")
        if name == "heads.mlm.bias" and shape != (config.vocab_size,):
            raise CheckpointError(f"{name}: shape {shape} disagrees with vocab size {config.vocab_size}")
        if name.startswith("heads.") and name.endswith(".weight") and shape[1:] != (config.hidden_size,):
            raise CheckpointError(f"{name}: shape {shape} disagrees with hidden size {config.hidden_size}")
        size = int(np.prod(shape))
        if offset + size > data.size:
            raise CheckpointError(f"params.bin too short for {name}")
        params[name] = data[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != data.size:
        raise CheckpointError(f"params.bin holds {data.size} floats, manifest describes {offset}")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    return ModelCheckpoint(
        config,
        params,
        manifest.get("provenance", "random_init"),
        tuple(manifest.get("lineage", ())),
        int(manifest.get("seed", 0)),
        manifest.get("pseudo_labeler"),
    )
