"""Dense float64 tensors and a tape-based reverse-mode differentiator.

A :class:`Tape` records every primitive applied through it together with a
closure mapping the output cotangent to input cotangents. :func:`backward`
replays the record in reverse. Tensors that were not produced by the tape
(parameters, data, constants) are leaves.

Elementwise binary ops accept operands of identical shape, or one operand
that broadcasts over the leading batch dimension (shape ``(k,)`` or
``(1, k)`` against ``(n, k)``), or a 0-d scalar.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    for big, small in ((a, b), (b, a)):
        if len(big) == 2 and small in ((big[1],), (1, big[1])):
            return big
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    return grad.sum(axis=0).reshape(shape)


def _quiet(method):
    # overflow shows up as inf/nan in the result, which _record rejects with
    # a NonFiniteError; numpy's own warning would only duplicate that
    @functools.wraps(method)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return method(*args, **kwargs)
    return wrapped


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op, inputs, value, vjp) -> Tensor:
        out = Tensor(_check_finite(op, value))
        self.nodes.append(Node(op, tuple(inputs), out, vjp))
        self._produced.add(id(out))
        return out

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    # primitives

    @_quiet
    def matmul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        A, B = a.data, b.data
        return self._record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))

    @_quiet
    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("add", a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._record(
            "add", (a, b), a.data + b.data,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    @_quiet
    def subtract(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("subtract", a.shape, b.shape)
        sa, sb = a.shape, b.shape
        return self._record(
            "subtract", (a, b), a.data - b.data,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    @_quiet
    def multiply(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        _broadcast_shape("multiply", a.shape, b.shape)
        A, B = a.data, b.data
        return self._record(
            "multiply", (a, b), A * B,
            lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
        )

    def relu(self, a) -> Tensor:
        a = _as_tensor(a)
        mask = a.data > 0
        return self._record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))

    def sigmoid(self, a) -> Tensor:
        a = _as_tensor(a)
        s = _stable_sigmoid(a.data)
        return self._record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))

    def softplus(self, a) -> Tensor:
        """``log(1 + exp(a))`` without overflow."""
        a = _as_tensor(a)
        x = a.data
        s = _stable_sigmoid(x)
        return self._record("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * s,))

    def exp(self, a) -> Tensor:
        a = _as_tensor(a)
        if np.any(a.data > 700.0):
            raise DomainError("exp: argument exceeds 700, result would overflow")
        e = np.exp(a.data)
        return self._record("exp", (a,), e, lambda g: (g * e,))

    def log(self, a) -> Tensor:
        a = _as_tensor(a)
        if np.any(a.data <= 0):
            raise DomainError("log: argument must be strictly positive")
        x = a.data
        return self._record("log", (a,), np.log(x), lambda g: (g / x,))

    @_quiet
    def square(self, a) -> Tensor:
        a = _as_tensor(a)
        x = a.data
        return self._record("square", (a,), x * x, lambda g: (2.0 * g * x,))

    @_quiet
    def sum(self, a, axis: int | None = None) -> Tensor:
        a = _as_tensor(a)
        shape = a.shape
        if axis is None:
            return self._record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
        out = a.data.sum(axis=axis)
        return self._record(
            "sum", (a,), out,
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    @_quiet
    def mean(self, a, axis: int | None = None) -> Tensor:
        a = _as_tensor(a)
        shape = a.shape
        count = a.size if axis is None else shape[axis]
        if count == 0:
            raise ShapeError("mean: empty tensor")
        if axis is None:
            return self._record(
                "mean", (a,), np.asarray(a.data.mean()),
                lambda g: (np.full(shape, float(g) / count),),
            )
        return self._record(
            "mean", (a,), a.data.mean(axis=axis),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / count,),
        )

    def concat(self, tensors: Sequence, axis: int = 1) -> Tensor:
        ts = tuple(_as_tensor(t) for t in tensors)
        if not ts:
            raise ShapeError("concat: no inputs")
        ref = ts[0].shape
        for t in ts[1:]:
            if len(t.shape) != len(ref) or any(
                t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
            ):
                raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
        splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
        return self._record(
            "concat", ts, np.concatenate([t.data for t in ts], axis=axis),
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


OPS = ("matmul", "add", "subtract", "multiply", "relu", "sigmoid", "softplus", "exp",
       "log", "square", "sum", "mean", "concat")


def forward_op(op_tag: str, inputs: Sequence, tape: Tape, **kwargs) -> Tensor:
    """Apply primitive ``op_tag`` to ``inputs`` and record it on ``tape``."""
    if op_tag not in OPS:
        raise ValueError(f"unknown op {op_tag!r}; supported: {', '.join(OPS)}")
    if op_tag == "concat":
        return tape.concat(inputs, **kwargs)
    return getattr(tape, op_tag)(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from leaf tensor to gradient. With ``wrt`` given, exactly
    those tensors are keyed, unreached ones mapping to zeros; otherwise every
    leaf reached from ``loss`` is returned.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = cot.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if not tape.produced(inp):
                leaves[key] = inp
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = np.asarray(gi, dtype=np.float64)
    if wrt is None:
        return {leaves[k]: cot[k].reshape(leaves[k].shape) for k in leaves}
    return {
        t: cot[id(t)].reshape(t.shape) if id(t) in cot else np.zeros(t.shape)
        for t in wrt
    }
