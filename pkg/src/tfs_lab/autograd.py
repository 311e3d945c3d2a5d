"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor.
The graph is implicit: ``Tensor.backward`` gathers the ancestors of the
loss and replays their closures in reverse creation order, so each node is
visited exactly once and gradients of shared inputs accumulate.

Data is float32 by default. Tests that compare against finite differences
build their tensors in float64; ops preserve the dtype of their inputs.
Reductions accumulate in float64.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DistributionError, NumericError, OptimizerError

DEFAULT_DTYPE = np.float32

_creation = itertools.count()


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Tensor:
    """A float array that can take part in a differentiable computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._order = next(_creation)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them."""
        if not self.requires_grad:
            raise NumericError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        ordered = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in ordered:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * d,)

    return _make(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.exp(-np.logaddexp(0, -xd)).astype(xd.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    out = x.data.astype(dtype)

    def backward(g):
        return (g.astype(x.dtype),)

    return _make(out, (x,), backward, "cast")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; the backward pass scatter-adds into the rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding index out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(out, (weight,), backward, "embedding")


# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with batch broadcasting.

    Backward: ``dA = dC @ B^T`` and ``dB = A^T @ dC``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# normalisation


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError("reduction over an empty axis")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / total).astype(x.dtype)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return ((out * (g - inner)).astype(x.dtype),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = (shifted - lse).astype(x.dtype)

    def backward(g):
        gsum = np.sum(g, axis=axis, keepdims=True, dtype=np.float64)
        return ((g - np.exp(out) * gsum).astype(x.dtype),)

    return _make(out, (x,), backward, "log_softmax")


def binary_log_probs(z: Tensor) -> Tensor:
    """Stack ``[log(1 - sigmoid(z)), log(sigmoid(z))]`` along a new last axis.

    Lets multi-label sigmoid outputs reuse the two-class cross-entropy and KL
    machinery.
    """
    zd = z.data
    # log sigmoid(z) = -softplus(-z); log(1 - sigmoid(z)) = -softplus(z)
    sp_pos = np.logaddexp(0, zd)
    sp_neg = np.logaddexp(0, -zd)
    out = np.stack([-sp_pos, -sp_neg], axis=-1).astype(zd.dtype)
    sig = np.exp(out[..., 1])

    def backward(g):
        return ((-g[..., 0] * sig + g[..., 1] * (1.0 - sig)).astype(zd.dtype),)

    return _make(out, (z,), backward, "binary_log_probs")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * rstd).astype(xd.dtype)
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=red, dtype=np.float64).astype(xd.dtype)
        gbias = np.sum(g, axis=red, dtype=np.float64).astype(xd.dtype)
        dxhat = g * gain.data
        s1 = dxhat.sum(axis=-1, keepdims=True, dtype=np.float64)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True, dtype=np.float64)
        gx = (rstd / n) * (n * dxhat - s1 - xhat * s2)
        return gx.astype(xd.dtype), ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise NumericError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# losses


def pick(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of ``-log_probs[row, target]`` over rows whose target is >= 0.

    ``log_probs`` is ``[..., C]``; ``targets`` has the leading shape with
    negative entries marking rows that contribute nothing.
    """
    targets = np.asarray(targets)
    if targets.shape != log_probs.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match {log_probs.shape[:-1]}")
    flat = log_probs.data.reshape(-1, log_probs.shape[-1])
    t = targets.reshape(-1)
    rows = np.nonzero(t >= 0)[0]
    if rows.size == 0:
        raise DimensionError("no rows selected for the loss")
    if t[rows].max() >= flat.shape[1]:
        raise DimensionError("target index out of range")
    chosen = flat[rows, t[rows]]
    out = np.asarray(-chosen.sum(dtype=np.float64) / rows.size, dtype=log_probs.dtype)

    def backward(g):
        full = np.zeros_like(flat)
        full[rows, t[rows]] = -g / rows.size
        return (full.reshape(log_probs.shape),)

    return _make(out, (log_probs,), backward, "nll")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return pick(log_softmax(logits, axis=-1), targets)


def kl_divergence(p, log_q: Tensor, rows: np.ndarray | None = None, atol: float = 1e-5) -> Tensor:
    """Mean over rows of ``sum_c p (log p - log q)``.

    ``p`` is a constant distribution (array or tensor; no gradient flows to
    it). Entries with ``p == 0`` contribute 0. ``rows`` optionally selects
    which leading positions take part in the mean.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.shape != log_q.shape:
        raise DimensionError(f"p shape {p.shape} does not match log_q shape {log_q.shape}")
    c = p.shape[-1]
    pf = p.reshape(-1, c)
    qf = log_q.data.reshape(-1, c).astype(np.float64)
    sel = np.ones(pf.shape[0], dtype=bool) if rows is None else np.asarray(rows, dtype=bool).reshape(-1)
    if sel.shape[0] != pf.shape[0]:
        raise DimensionError("row selector does not match distribution rows")
    n = int(sel.sum())
    if n == 0:
        raise DimensionError("no rows selected for the KL term")
    ps = pf[sel]
    if (ps < 0).any() or np.abs(ps.sum(axis=-1) - 1.0).max() > atol:
        raise DistributionError("p must be nonnegative and sum to 1 per row")
    logp = np.log(np.where(ps > 0, ps, 1.0))
    per_row = np.sum(np.where(ps > 0, ps * (logp - qf[sel]), 0.0), axis=-1)
    out = np.asarray(per_row.sum() / n, dtype=log_q.dtype)

    def backward(g):
        full = np.zeros_like(pf)
        full[sel] = -pf[sel] * (float(g) / n)
        return (full.reshape(log_q.shape).astype(log_q.dtype),)

    return _make(out, (log_q,), backward, "kl")


# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        for name in ("lr", "beta1", "beta2", "eps"):
            if name in hyper and not hyper[name] > 0:
                raise OptimizerError(f"{name} must be positive")
        return cls(
            m=[np.zeros(p.shape, dtype=np.float64) for p in params],
            v=[np.zeros(p.shape, dtype=np.float64) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: OptimizerState
) -> list[np.ndarray]:
    """One bias-corrected Adam update. Updates ``state`` in place, returns new params."""
    if len(grads) != len(params) or any(g is None for g in grads):
        raise OptimizerError("every parameter needs a gradient before an update")
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        new.append(_check_finite((p - update).astype(p.dtype), "adam_step"))
    return new


class Adam:
    """Adam over a list of parameter tensors, with optional global-norm clipping."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: float | None = None,
    ):
        self.params = list(params)
        self.grad_clip = grad_clip
        self.state = OptimizerState.for_params(
            [p.data for p in self.params], lr=lr, beta1=beta1, beta2=beta2, eps=eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d


# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, int] | None
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is zero from dividing by noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst, worst_at, checked = 0.0, None, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(f().data)
            flat[j] = orig - step
            down = float(f().data)
            flat[j] = orig
            num = (up - down) / (2 * step)
            a = float(analytic[pi].reshape(-1)[j])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (pi, j)
    for p in params:
        p.grad = None
    return GradCheckReport(worst, worst_at, checked, tolerance)
