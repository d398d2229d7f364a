"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order; :meth:`Tape.backward` replays them in reverse, which is
a valid reverse topological order because every node is recorded after
all of its inputs exist.  Outside an active tape nothing is recorded, so
inference code needs no special context.

Only the operations the transformer needs are provided, several of them
fused (softmax with mask, log-softmax, layer norm) so that each has a
single closed-form backward rule.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "backward",
    "record_op",
    "set_default_dtype",
    "get_default_dtype",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "embedding",
    "where",
    "relu",
    "exp",
    "log",
    "concat",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the computation tape."""


_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype} (no implicit promotion)")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return _add(self, self._lift(other))

    def __radd__(self, other):
        return _add(self._lift(other), self)

    def __sub__(self, other):
        return _sub(self, self._lift(other))

    def __rsub__(self, other):
        return _sub(self._lift(other), self)

    def __mul__(self, other):
        return _mul(self, self._lift(other))

    def __rmul__(self, other):
        return _mul(self._lift(other), self)

    def __truediv__(self, other):
        return _div(self, self._lift(other))

    def __rtruediv__(self, other):
        return _div(self._lift(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def backward(self) -> None:
        backward(self)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside it are recorded.  A
    tape can be replayed once; call :meth:`reset` before reusing it.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes = []
        self._consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before a second backward")
        if not self.nodes:
            raise TapeError("tape is empty; nothing to differentiate")
        self._consumed = True

        grads: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
        for out, inputs, fn in reversed(self.nodes):
            entry = grads.pop(id(out), None)
            if entry is None:
                continue
            g = entry[1]
            out.grad = g
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = (inp, ig if prev is None else prev[1] + ig)
        for tensor, g in grads.values():
            g = np.asarray(g, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active Tape")
    tape.backward(loss)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Nothing is recorded when no tape is active or no input needs a grad.
    """
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return record_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return record_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def _neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def where(cond, a: Tensor, fill: float) -> Tensor:
    """Entries of ``a`` where ``cond`` holds, ``fill`` elsewhere."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, np.asarray(fill, dtype=a.dtype))
    return record_op(out, (a,), lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),))


# -- shape ---------------------------------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(np.asarray(out, dtype=a.dtype), (a,), bw)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record_op(np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                     lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with trailing-dimension broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: fold the batch into rows so grad(b) is one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return record_op(out, (a, b), bw2)
    try:
        out = a.data @ b.data
    except ValueError as err:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from err

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), bw)


# -- fused normalisers -------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax along ``axis``.

    ``mask`` (True = keep) is broadcast against ``x``.  Masked entries are
    exactly zero; a row with every entry masked is all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record_op(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = g * gamma.data
        n = x.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return record_op(out, (x, gamma, beta), bw)


# -- stochastic / lookup -------------------------------------------------------

def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return record_op(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return record_op(weight.data[ids], (weight,), bw)
