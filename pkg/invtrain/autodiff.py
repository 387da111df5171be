"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Every operation whose inputs require gradients appends an entry to the current
:class:`Tape`: the inputs, the output and a rule mapping the output gradient to
input gradients. :func:`backward` replays the entries in reverse order.

A tape is meant to live for a single training step::

    with Tape():
        loss = total(...)
        backward(loss)

Outside an explicit ``with Tape()`` block operations record onto a module
default tape, which is replaced once it has been consumed.
"""

import logging
from contextlib import contextmanager
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from invtrain.exceptions import (
    NotScalarError,
    ShapeMismatchError,
    TapeConsumedError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

EPSILON_NORM = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeEntry(NamedTuple):
    """One recorded operation."""

    inputs: tuple
    output: "Tensor"
    rule: BackwardRule


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False
        self._next_node = 0

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        """Forget every entry so the tape can record (and be replayed) again."""
        self.entries = []
        self.consumed = False
        self._next_node = 0

    def record(self, inputs: tuple, output: "Tensor", rule: BackwardRule) -> None:
        """Append an entry; node ids follow recording order, so entries stay topological."""
        if self.consumed:
            raise TapeConsumedError("cannot record onto a consumed tape; call reset() first")
        output.node = self._next_node
        output.tape = self
        self._next_node += 1
        self.entries.append(TapeEntry(inputs=inputs, output=output, rule=rule))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` on every gradient-requiring tensor reachable from ``loss``."""
        if loss.size != 1:
            raise NotScalarError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeConsumedError("backward() was already called on this tape")
        self.consumed = True
        if not loss.requires_grad:
            return

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            out_grad = grads.get(id(entry.output))
            if out_grad is None:
                continue
            for tensor, in_grad in zip(entry.inputs, entry.rule(out_grad)):
                if in_grad is None or not tensor.requires_grad:
                    continue
                if in_grad.shape != tensor.shape:
                    raise ShapeMismatchError(f"gradient shape {in_grad.shape} != tensor shape {tensor.shape}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + in_grad
                else:
                    grads[key] = in_grad
                    owners[key] = tensor

        for key, tensor in owners.items():
            tensor.grad = grads[key].copy() if tensor.grad is None else tensor.grad + grads[key]


_ACTIVE_TAPES: list[Tape] = []
_DEFAULT_TAPE = [Tape()]
_RECORDING = [True]


def current_tape() -> Tape:
    """Innermost ``with Tape()`` block, else the module default tape."""
    if _ACTIVE_TAPES:
        return _ACTIVE_TAPES[-1]
    if _DEFAULT_TAPE[0].consumed:
        _DEFAULT_TAPE[0] = Tape()
    return _DEFAULT_TAPE[0]


@contextmanager
def no_grad():
    """Evaluate without recording: outputs never require gradients."""
    previous = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = previous


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        out.tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return select(self, index)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, inputs: tuple, rule: BackwardRule) -> Tensor:
    needs_grad = _RECORDING[0] and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        current_tape().record(inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# Elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(t.data * factor, (t,), lambda g: (g * factor,))


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _result(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    return _result(np.log(t.data), (t,), lambda g: (g / t.data,))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return _result(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


# Reductions and shape


def sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # pylint: disable=redefined-builtin
    axes = _axes(axis, t.ndim)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _result(np.sum(t.data, axis=axes, keepdims=keepdims), (t,), rule)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, t.ndim)
    count = int(np.prod([t.shape[a] for a in axes]))
    return scale(sum(t, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(t: Tensor, shape) -> Tensor:
    return _result(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


def broadcast_to(t: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(t.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot broadcast {t.shape} to {tuple(shape)}") from exc
    return _result(out, (t,), lambda g: (_unbroadcast(g, t.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def select(t: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the gradient is scattered back with accumulation."""

    def rule(g):
        full = np.zeros_like(t.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(t.data[index], (t,), rule)


def take_rows(t: Tensor, rows) -> Tensor:
    return select(t, np.asarray(rows, dtype=np.intp))


def detach(t: Tensor) -> Tensor:
    return t.detach()


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _result(a.data @ b.data, (a, b), rule)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a matrix, got {t.shape}")
    return _result(t.data.T.copy(), (t,), lambda g: (g.T.copy(),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"dot needs equal vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


# Normalization and similarity


def l2n(v: Tensor, axis: int = -1) -> Tensor:
    """L2-normalize along ``axis`` (rows of a matrix, or a single vector)."""
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm <= EPSILON_NORM):
        raise ZeroVectorError(f"cannot normalize a vector with norm <= {EPSILON_NORM}")
    out = v.data / norm

    def rule(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _result(out, (v,), rule)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors (scalar) or of matching rows (vector)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cosine_sim needs equal shapes, got {a.shape} and {b.shape}")
    return sum(mul(l2n(a), l2n(b)), axis=-1)


# Softmax family


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp."""
    peak = np.max(t.data, axis=axis, keepdims=True)
    shifted = np.exp(t.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = peak + np.log(total)
    probs = shifted / total

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (t,), rule)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    peak = np.max(t.data, axis=axis, keepdims=True)
    shifted = t.data - peak
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result(out, (t,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(t, axis=axis))


# Convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 "same" cross-correlation of [C,H,W] or [B,C,H,W] with [O,C,k,k] kernels (k odd)."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4 or xd.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"conv2d cannot combine input {x.shape} with kernel {weight.shape}")
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k:
        raise ShapeMismatchError(f"conv2d needs square odd kernels, got {weight.shape}")
    pad = k // 2
    height, width = xd.shape[2:]
    padded = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g):
        g4 = g[None] if single else g
        grad_w = np.einsum("bchwij,bohw->ocij", windows, g4, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + height, j : j + width] += np.einsum(
                    "bohw,oc->bchw", g4, weight.data[:, :, i, j], optimize=True
                )
        grad_x = grad_padded[:, :, pad : pad + height, pad : pad + width]
        grads = [grad_x[0] if single else grad_x, grad_w]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out[0] if single else out, inputs, rule)


def avg_pool2x(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows of the trailing two axes."""
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeMismatchError(f"avg_pool2x needs even spatial extents, got {x.shape}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, height // 2, 2, width // 2, 2).mean(axis=(-3, -1))

    def rule(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return _result(out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the trailing two (spatial) axes."""
    return mean(x, axis=(-2, -1))


# Driving differentiation


def backward(loss: Tensor) -> None:
    """Replay the tape that produced ``loss``."""
    tape = loss.tape if loss.tape is not None else current_tape()
    tape.backward(loss)


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    ``numeric`` is the central finite difference with the given step.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    base = as_tensor(x).data.copy()
    variable = Tensor(base, requires_grad=True)
    with Tape():
        backward(f(variable))
    analytic = variable.grad if variable.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            perturbed = base.copy().reshape(-1)
            perturbed[i] += step
            upper = f(Tensor(perturbed.reshape(base.shape))).item()
            perturbed[i] -= 2 * step
            lower = f(Tensor(perturbed.reshape(base.shape))).item()
            flat[i] = (upper - lower) / (2 * step)

    error = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(error.max()) if error.size else 0.0
