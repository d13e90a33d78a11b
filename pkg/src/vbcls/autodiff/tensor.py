"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every differentiable operation appends a node to the thread's active
:class:`Tape`. Nodes are recorded in creation order, so the tape is
topologically sorted by construction and :func:`backward` is a single
reverse sweep. A tape is consumed by ``backward``; the next recorded
operation opens a fresh one.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from vbcls.errors import InvalidLabelError, InvalidShapeError, StaleTapeError

_local = threading.local()


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> Tape:
    """Discard whatever is recorded and start an empty tape."""
    _local.tape = Tape()
    return _local.tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def relu_monitor():
    """Collect the sign pattern of every relu evaluated inside the block.

    Used by the finite-difference checker to reject perturbations that
    cross a kink.
    """
    prev = getattr(_local, "relu_log", None)
    log: list[bytes] = []
    _local.relu_log = log
    try:
        yield log
    finally:
        _local.relu_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        tape = current_tape()
        for p in parents:
            if p._tape is not None and p._tape is not tape:
                raise StaleTapeError("operand was recorded on a tape that has already been consumed")
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def expm1(x) -> Tensor:
    """``exp(x) - 1`` without cancellation near zero."""
    x = as_tensor(x)
    out = np.expm1(x.data)
    return _record(out, (x,), lambda g: (g * (out + 1.0),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    log_ = getattr(_local, "relu_log", None)
    if log_ is not None:
        log_.append(np.packbits(mask).tobytes())
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def scale_grad(x, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the gradient by ``factor``."""
    x = as_tensor(x)
    return _record(x.data.copy(), (x,), lambda g: (g * factor,))


# -- reductions and structure ----------------------------------------------

def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(a, b) -> Tensor:
    """Juxtapose two row-stacked tensors along the feature axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise InvalidShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    da = a.shape[1]
    return _record(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :da], g[:, da:]))


def columns(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop].copy(), (x,), backward)


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), backward)


def stack_rows(parts: Sequence[Tensor], index_sets: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Scatter row blocks back into one matrix: rows ``index_sets[i]`` come from ``parts[i]``."""
    parts = [as_tensor(p) for p in parts]
    width = parts[0].shape[1]
    out = np.zeros((n_rows, width))
    for p, idx in zip(parts, index_sets):
        out[idx] = p.data
    return _record(out, tuple(parts), lambda g: tuple(g[idx] for idx in index_sets))


# -- layers and losses ------------------------------------------------------

def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for row-stacked ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim == 1:
        x = Tensor(x.data[None, :]) if not x.requires_grad else reshape(x, (1, -1))
    if W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape not in {(W.shape[1],), (1, W.shape[1])}:
        raise InvalidShapeError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    return add(matmul(x, W), b)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _record(out, (logits,),
                   lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def softmax(logits) -> np.ndarray:
    """Plain (non-recorded) row softmax."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def smoothed_targets(target, n_classes: int, smoothing: float) -> np.ndarray:
    target = np.atleast_1d(np.asarray(target))
    if target.dtype.kind not in "iu" or np.any(target < 0) or np.any(target >= n_classes):
        raise InvalidLabelError(f"targets must be integers in [0, {n_classes}), got {target.tolist()}")
    t = np.full((target.size, n_classes), smoothing / n_classes)
    t[np.arange(target.size), target] += 1.0 - smoothing
    return t


def softmax_cross_entropy(logits, target, smoothing: float = 0.0, reduce: str = "mean") -> Tensor:
    """Label-smoothed cross-entropy of row logits against class indices.

    ``reduce="mean"`` averages over rows (a 1xK input gives the plain loss);
    ``reduce="none"`` returns one value per row.
    """
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, -1))
    t = smoothed_targets(target, logits.shape[1], smoothing)
    if t.shape[0] != logits.shape[0]:
        raise InvalidShapeError(f"{t.shape[0]} targets for {logits.shape[0]} rows")
    per_row = -sum_(log_softmax(logits) * t, axis=1)
    return mean(per_row) if reduce == "mean" else per_row


def squared_error(a, b) -> Tensor:
    """Sum of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"squared_error: shapes {a.shape} and {b.shape} differ")
    return sum_(square(sub(a, b)))


# -- backward ---------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` and consume its tape.

    Leaf gradients are overwritten, not accumulated. Tensors in ``params``
    that the loss does not reach get zero gradients.
    """
    if loss.size != 1:
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    if tape.consumed:
        raise StaleTapeError("this tape was already consumed by a previous backward call")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._tape is None:
                key = id(parent)
                if key in leaf_grads:
                    leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                else:
                    leaf_grads[key] = (parent, np.array(pg, dtype=np.float64))
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.nodes.clear()
    for parent, g in leaf_grads.values():
        parent.grad = g.reshape(parent.shape)
