"""Dense tensors with reverse-mode autodiff and an Adam optimizer.

Define-by-run: every op records its parents and a gradient closure, and the
tape is rebuilt on each forward pass. float32 is the working precision;
passing float64 arrays switches the whole computation to 64-bit, which is
what gradient verification uses. Single-threaded by design: tensors are
treated as immutable once a forward pass completes, except for ``grad``
accumulation during ``backward``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ShapeMismatchError

# Tape construction is toggled per thread so read-only decoding may run in
# worker threads without disturbing a training thread.
_grad_state = threading.local()


def _grads_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


# Debug knob for the gradcheck negative control: deliberately corrupts the
# matmul gradient rule so a broken engine is provably caught.
_corrupt_matmul_grad = False


class no_grad:
    """Context manager that disables tape construction (inference mode)."""

    def __enter__(self):
        self._prev = _grads_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """n-dimensional array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grads_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting by summing gradient over expanded axes."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    # Python scalars stay scalars so numpy's weak promotion keeps the
    # working dtype (a float64 0-d array would silently upcast float32).
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = a.data + b

        def grad_fn(g):
            return (g,)

        return _make(out, (a,), grad_fn)
    if isinstance(a, (int, float)):
        return add(b, a)
    out = a.data + b.data

    def grad_fn(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = a.data * b

        def grad_fn(g):
            return (g * b,)

        return _make(out, (a,), grad_fn)
    if isinstance(a, (int, float)):
        return mul(b, a)
    out = a.data * b.data

    def grad_fn(g):
        return (_sum_to_shape(g * b.data, a.shape),
                _sum_to_shape(g * a.data, b.shape))

    return _make(out, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if _corrupt_matmul_grad:
            ga = ga * 1.001
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _make(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _make(np.asarray(out), (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def narrow(x: Tensor, key) -> Tensor:
    """Basic slicing. Gradient scatters back into a zero tensor."""
    out = x.data[key]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), grad_fn)


def cross_entropy_soft(logits: Tensor, soft_labels, weights) -> Tensor:
    """Weighted-mean cross entropy against full soft label distributions.

    ``soft_labels`` has the same shape as ``logits``; ``weights`` covers the
    leading (position) axes, with 0 masking a position out entirely. Rows
    carrying nonzero weight must be normalized distributions.
    """
    labels = np.asarray(soft_labels.data if isinstance(soft_labels, Tensor)
                        else soft_labels)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights,
                   dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeMismatchError(
            f"cross_entropy_soft: labels {labels.shape} vs logits {logits.shape}")
    if w.shape != logits.shape[:-1]:
        raise ShapeMismatchError(
            f"cross_entropy_soft: weights {w.shape} vs positions {logits.shape[:-1]}")
    active = w > 0
    row_sums = labels.sum(axis=-1)
    if active.any() and np.abs(row_sums[active] - 1.0).max() > 1e-6:
        worst = float(np.abs(row_sums[active] - 1.0).max())
        raise ContractViolation(
            f"soft label rows must sum to 1 (worst deviation {worst:.3e})")
    total = float(w.sum())
    if total <= 0:
        raise ContractViolation("cross_entropy_soft: no active positions")
    logp = log_softmax(logits, axis=-1)
    per_pos = mul(tsum(mul(logp, Tensor(labels.astype(logits.dtype))), axis=-1), -1.0)
    return mul(tsum(mul(per_pos, Tensor(w))), 1.0 / total)


# ---------------------------------------------------------------------------
# neural-net plumbing


def masked_fill_neg_inf(x: Tensor, keep) -> Tensor:
    """Replace entries where ``keep`` is False with -inf (for attention
    masking). A where-based fill is exact no matter what the masked slots
    hold, so garbage at padded positions can never reach a logit."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out = np.where(keep, x.data, np.asarray(-np.inf, dtype=x.dtype))

    def grad_fn(g):
        return (np.where(keep, g, 0.0),)

    return _make(out, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather with gradient scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ContractViolation(
            f"embedding_lookup: id out of range for vocab of {vocab}")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization over the last axis with learned gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales by 1/(1-rate) at train time."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    out = x.data * mask

    def grad_fn(g):
        return (g * mask,)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss is not connected to any tracked tensor")

    # Iterative post-order topological sort; graphs can be deep.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._grad_fn(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            # Grad arrays are never mutated in place, so sharing is safe.
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Adam with linear warmup and inverse-sqrt decay


@dataclass
class AdamState:
    """Optimizer state; moment buffers are keyed like the parameter dict."""

    base_lr: float = 1e-3
    warmup_steps: int = 400
    init_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int) -> float:
        """Linear warmup from init_lr, then inverse-sqrt decay; continuous
        at the warmup boundary."""
        if step <= self.warmup_steps:
            return self.init_lr + (self.base_lr - self.init_lr) * step / self.warmup_steps
        return self.base_lr * math.sqrt(self.warmup_steps / step)


def adam_step(params: dict[str, Tensor], state: AdamState) -> float:
    """One Adam update with bias correction; returns the lr used."""
    state.step += 1
    t = state.step
    lr = state.learning_rate(t)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractViolation(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - lr * update
    return lr
