# core/autograd.py
"""
Dense tensors with tape-based reverse-mode differentiation and an Adam optimizer.

Every op records itself on the innermost active `Tape` when at least one input
requires a gradient. Leaf tensors created with `requires_grad=True` are the
trainable parameters; `Tape.backward` accumulates into their `.grad` arrays.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import CHECK_FINITE
from .errors import ContractError, DimensionError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DTYPE = np.float32
_TAPES: List[Optional["Tape"]] = []
_NODE_IDS = itertools.count()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Switch the storage dtype for tensors created inside the block (float64 for gradient checks).
    """
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def current_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "is_leaf")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _leaf: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        self.grad = np.zeros_like(self.data) if (requires_grad and _leaf) else None
        self.node_id = next(_NODE_IDS)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


def parameter(data: ArrayLike) -> Tensor:
    """
    Trainable leaf tensor.
    """
    return Tensor(np.array(data, dtype=_DTYPE, copy=True), requires_grad=True)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out_id: int
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn
    live: Tuple[bool, ...] = ()   # requires_grad of each input when recorded


class Tape:
    """
    Ordered record of the ops run while the tape is active. One backward per tape.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """
        Populate `.grad` on every trainable leaf reachable from `loss`.
        """
        if self.consumed:
            raise UsageError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        if not self.records or all(r.out_id != loss.node_id for r in self.records):
            raise ContractError("loss was not recorded on this tape")

        grads = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for t, live, gi in zip(rec.inputs, rec.live, rec.backward(g)):
                if gi is None or not live:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi.astype(t.grad.dtype, copy=False)
                elif t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Run ops without recording, even inside an active tape.
    """
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, _leaf=False)
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise ContractError("non-finite values produced in forward pass")
    if needs:
        tape.records.append(_Record(out.node_id, tuple(inputs), backward_fn,
                                    tuple(t.requires_grad for t in inputs)))
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum out broadcast dimensions so `grad` matches `shape`.
    """
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# =============================================================================
# Elementwise ops
# =============================================================================
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
    """
    tanh approximation of GELU.
    """
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit(out, (a,), _bw)


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def masked_fill(a: ArrayLike, mask: np.ndarray, value: float) -> Tensor:
    """
    Replace entries where `mask` is True with a constant; no gradient flows through them.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    return _emit(out, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def dropout(a: ArrayLike, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return _emit(a.data * keep, (a,), lambda g: (g * keep,))


# =============================================================================
# Shape ops and reductions
# =============================================================================
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(da, a.shape), unbroadcast(db, b.shape)

    return _emit(out, (a, b), _bw)


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), _bw)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), _bw)


def take_rows(table: ArrayLike, ids: Sequence[int]) -> Tensor:
    """
    Row gather (embedding lookup) with scatter-add backward.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.data[ids], (table,), _bw)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


# =============================================================================
# Softmax family and losses
# =============================================================================
def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = _softmax_np(a.data, axis)
    return _emit(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax_np(a.data, axis)
    probs = np.exp(out)
    return _emit(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: ArrayLike, targets: Sequence[int]) -> Tensor:
    """
    Mean over positions of -log softmax(logits_t)[target_t].
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    T, V = logits.shape
    if targets.shape != (T,):
        raise ContractError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if T and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id outside vocabulary of size {V}")
    logp = _log_softmax_np(logits.data, -1)
    rows = np.arange(T)
    loss = -logp[rows, targets].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / T),)

    return _emit(np.asarray(loss), (logits,), _bw)


def soft_cross_entropy(teacher_probs: ArrayLike, student_logits: ArrayLike, tol: float = 1e-4) -> Tensor:
    """
    Mean over positions of -sum_v p_teacher * log softmax(student). Teacher is a constant.
    """
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    student = as_tensor(student_logits)
    if p.shape != student.shape:
        raise DimensionError(f"teacher {p.shape} and student {student.shape} differ")
    row_sums = p.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, atol=tol, rtol=0.0):
        raise ContractError("teacher rows must sum to 1")
    T = p.shape[0]
    logq = _log_softmax_np(student.data, -1)
    loss = -(p * logq).sum(axis=-1).mean()

    def _bw(g):
        q = np.exp(logq)
        return ((q * row_sums[:, None] - p) * (g / T),)

    return _emit(np.asarray(loss), (student,), _bw)


# =============================================================================
# Optimizer
# =============================================================================
@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 0.00025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "constant"
    total_steps: int = 1
    history: List[float] = field(default_factory=list)


def init_optimizer(params: Sequence[Tensor], lr: float = 0.00025, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
                   schedule: str = "constant", total_steps: int = 1) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        schedule=schedule, total_steps=max(1, int(total_steps)),
    )


def lr_factor(step: int, total_steps: int, schedule: str) -> float:
    if schedule == "cosine":
        progress = min(step, total_steps) / float(total_steps)
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return 1.0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> OptimizerState:
    """
    One Adam update with bias correction and decoupled weight decay, in place.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer moments must align")
    state.step += 1
    t = state.step
    lr = state.lr * lr_factor(t, state.total_steps, state.schedule)
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise DimensionError(f"moment shape {m.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    state.history.append(lr)
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """
    Scale grads in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
    """
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


class Adam:
    """
    Owns a parameter list and its OptimizerState.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.00025, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, schedule: str = "constant",
                 total_steps: int = 1, grad_clip: Optional[float] = None):
        self.params = list(params)
        self.grad_clip = grad_clip
        self.state = init_optimizer(self.params, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay, schedule=schedule, total_steps=total_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.grad_clip) if self.grad_clip else 0.0
        adam_step(self.params, [p.grad for p in self.params], self.state)
        return norm
