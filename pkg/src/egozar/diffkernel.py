"""A small reverse-mode differentiation kernel on top of numpy.

Tensors hold float64 arrays. Operators executed while a :class:`Tape` is
active, and that touch at least one tensor with ``requires_grad``, append a
node to the tape; :func:`backward` replays those nodes in reverse order.
Without an active tape every operator is a plain numpy evaluation, which is
what the finite-difference checks use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, LabelError

__all__ = [
    "Tensor",
    "Tape",
    "BatchNorm",
    "OptimizerState",
    "linear",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "softmax",
    "cross_entropy",
    "mean",
    "sum_all",
    "concat",
    "reshape",
    "transpose",
    "dropout",
    "batch_norm",
    "gradient_reversal",
    "backward",
    "sgd_step",
    "lr_schedule",
    "init_linear",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tape:
    """Records operators for reverse-mode differentiation.

    Use as a context manager; tapes are thread-local and may nest (the
    innermost one records).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.name = None
    if track:
        tape.nodes.append(_Node(out, inputs, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- operators


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the trailing dimension of ``x``."""
    if W.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
    xd, Wd = x.data, W.data
    y = xd @ Wd
    if b is not None:
        y = y + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _result(y, inputs, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands carry the same leading dimensions."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _result(y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    return _result(y, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _check_axis(x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % nd


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, C = logits.shape
    if B and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"cross_entropy: labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - z[rows, labels]))

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / B),)

    return _result(np.array(loss), (logits,), rule)


def mean(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _result(x.data.mean(axis=axis), (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    first = tensors[0]
    axis = _check_axis(first, axis)
    for t in tensors[1:]:
        if t.data.ndim != first.data.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.data.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _result(y, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity at eval time or when ``p`` is 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def gradient_reversal(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ContractError(f"gradient_reversal: lambda must be >= 0, got {lam}")
    return _result(x.data, (x,), lambda g: (-lam * g,))


class BatchNorm:
    """Per-feature batch normalisation over a ``(B, D)`` input."""

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1, name: str = "bn"):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.weight")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, bn: BatchNorm, training: bool) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != bn.dim:
        raise DimensionError(f"batch_norm: input shape {x.shape} vs {bn.dim} features")
    B = x.shape[0]
    gamma, beta = bn.gamma.data, bn.beta.data
    if not training:
        inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (x.data - bn.running_mean) * inv
        y = xhat * gamma + beta

        def eval_rule(g):
            return g * gamma * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _result(y, (x, bn.gamma, bn.beta), eval_rule)

    if B < 2:
        raise DegenerateBatchError(f"batch_norm: training mode needs at least 2 samples, got {B}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma + beta
    m = bn.momentum
    bn.running_mean = (1 - m) * bn.running_mean + m * mu
    bn.running_var = (1 - m) * bn.running_var + m * var * (B / (B - 1))

    def rule(g):
        gxhat = g * gamma
        gx = inv / B * (B * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(y, (x, bn.gamma, bn.beta), rule)


# ---------------------------------------------------------------- gradients


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64)
            else:
                inp.grad += gi


# ---------------------------------------------------------------- optimisation


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "OptimizerState":
        return cls(velocity=[np.zeros_like(p.data) for p in params], **kwargs)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """Heavy-ball SGD with weight decay folded into the gradient, in place.

    ``v <- momentum * v + (g + weight_decay * p)`` then ``p <- p - lr * v``.
    """
    mu, wd, lr = state.momentum, state.weight_decay, state.learning_rate
    for p, g, v in zip(params, grads, state.velocity):
        step = p.data * wd if g is None else g + wd * p.data
        v *= mu
        v += step
        p.data -= lr * v


def lr_schedule(epoch: int, base_lr: float, drops: Sequence[int] = (10, 20), factor: float = 0.1) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return base_lr * factor ** sum(1 for d in drops if epoch >= d)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, name: str) -> tuple[Tensor, Tensor]:
    bound = 1.0 / math.sqrt(d_in)
    W = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True, name=f"{name}.weight")
    b = Tensor(rng.uniform(-bound, bound, size=d_out), requires_grad=True, name=f"{name}.bias")
    return W, b
