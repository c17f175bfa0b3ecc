"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations only record themselves
when a :class:`Tape` is active *and* at least one input requires a
gradient, so inference code runs without any bookkeeping::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(w, w))
    tape.backward(loss)
    w.grad  # -> array([2., 2., 2.])
"""

from __future__ import annotations

import struct
from collections import Counter
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

# incident counts for numeric guards (e.g. clamped shunting denominators)
numeric_warnings: Counter = Counter()

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations applied during a forward pass."""

    def __init__(self):
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((op, out, parents, backward))

    def backward(self, loss: Tensor) -> list[str]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        Returns the op names in the order they were visited (reverse of the
        forward order), which tests use to check replay order.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for _, out, parents, _ in self.records:
            out.zero_grad()
            for p in parents:
                p.zero_grad()
        loss.grad = np.ones_like(loss.data)
        visited = []
        for op, out, parents, fn in reversed(self.records):
            visited.append(op)
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is not None and p.requires_grad:
                    p.grad += g
        return visited


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if gradients are needed."""
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, out, tuple(parents), backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", np.concatenate([p.data for p in parts], axis=axis), parts, back)


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return make_result("stack", np.stack([p.data for p in parts], axis=axis), parts, back)


def tsum(a: Tensor) -> Tensor:
    return make_result("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return make_result(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------------------
# binary layout: uint32 ndim, uint32 dims..., float64 payload, little-endian


def tensor_to_bytes(a) -> bytes:
    arr = np.ascontiguousarray(a.data if isinstance(a, Tensor) else a, dtype="<f8")
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", buf, 0)
    dims = struct.unpack_from(f"<{ndim}I", buf, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != offset + 8 * count:
        raise ShapeError(f"tensor blob holds {len(buf) - offset} payload bytes, dims {dims} need {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=offset, count=count).reshape(dims).astype(np.float64)
