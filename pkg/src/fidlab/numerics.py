"""Reverse-mode autodiff over numpy arrays, plus the optimizer and LR schedule.

A ``Tensor`` wraps an ``np.ndarray``. Operations on tensors that require
gradients record a closure on the output node; ``Tensor.backward`` walks the
recorded graph in reverse topological order, visiting each node once.
Training runs in float32; gradient checks run the same code in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True

# Additive mask value for excluded attention keys. Finite so masked rows never
# produce NaN; exp(-1e9 - max) underflows to exactly 0 in both precisions.
MASK_VALUE = -1e9


class NumericalAbort(RuntimeError):
    """Raised when a non-finite value reaches the optimizer or the loss."""


class GradCheckError(RuntimeError):
    def __init__(self, message: str, index: tuple | None = None):
        super().__init__(message)
        self.index = index


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- graph ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        # gradients are never modified in place, so aliasing g is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate gradients are no longer needed
                if node._parents:
                    node.grad = None

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def relu(self):
        return relu(self)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _result(out, (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * out))


def tlog(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * (1 - out * out)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    # a weight matrix shared across a batch: fold leading axes into one gemm
    folded = b.ndim == 2 and a.ndim > 2

    def bw(g):
        if folded:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    if folded:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return _result(out, (a, b), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inverse)))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _result(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * weight over the last axis."""
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data

    def bw(g):
        if weight.requires_grad:
            weight._accumulate(_unbroadcast(g * xhat, weight.shape))
        if x.requires_grad:
            gx = g * weight.data
            d = x.shape[-1]
            x._accumulate(inv * (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))

    return _result(out, (x, weight), bw)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def _softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, temperature: float = 1.0, axis: int = -1):
    """Temperature softmax ``exp(x_i / T) / sum_j exp(x_j / T)``.

    Accepts a ``Tensor`` (differentiable) or anything array-like (returns an
    ndarray). Raises ``ValueError`` for ``T <= 0`` or NaN logits.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(logits, Tensor):
        if np.isnan(logits.data).any():
            raise ValueError("softmax received NaN logits")
        scaled = logits.data / temperature if temperature != 1.0 else logits.data
        out = _softmax_array(scaled, axis)

        def bw(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            logits._accumulate(out * (g - inner) / temperature)

        return _result(out, (logits,), bw)
    x = np.asarray(logits, dtype=float)
    if np.isnan(x).any():
        raise ValueError("softmax received NaN logits")
    return _softmax_array(x / temperature, axis)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        logits._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _result(out, (logits,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token negative log-likelihood over unmasked positions.

    ``logits`` has shape (..., V); ``targets`` has the leading shape. ``mask``
    (same shape as targets, truthy = counted) defaults to all positions.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    active = targets[mask]
    if active.size and (active.min() < 0 or active.max() >= vocab):
        raise ValueError(f"target id out of range for vocabulary of size {vocab}")
    safe = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * mask
    count = max(int(mask.sum()), 1)
    loss = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        logits._accumulate((g / count) * p * mask[..., None])

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], *points: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` receives one float64 ``Tensor`` per point and returns a scalar
    ``Tensor``. The error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in points]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with_grad = fn(*leaves)
    with_grad.backward()
    worst = 0.0
    for which, (arr, leaf) in enumerate(zip(arrays, leaves)):
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        if not np.all(np.isfinite(ad)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(ad))[0])
            raise GradCheckError(f"non-finite gradient in input {which} at {bad}", (which, *bad))
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            with no_grad():
                up = fn(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig - step
            with no_grad():
                down = fn(*[Tensor(a) for a in arrays]).item()
            arr[idx] = orig
            fd = (up - down) / (2 * step)
            err = abs(ad[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, warmup_steps: int, base_lr: float) -> float:
    """Constant-with-warmup: linear ramp from 0, then flat at ``base_lr``."""
    if step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class OptimizerState:
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads.values())
    scale = min(1.0, max_norm / (norm + 1e-6)) if max_norm > 0 else 1.0
    if scale == 1.0:
        return dict(grads), norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> float:
    """One AdamW update in place. Returns the pre-clipping gradient norm."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    clipped, norm = clip_grads(grads, state.max_grad_norm)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in clipped.items():
        p = params[name]
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p *= 1 - lr * state.weight_decay
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return norm
