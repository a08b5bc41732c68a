"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous float64 ndarray and remembers, for each
derived value, its parent tensors plus a closure that pushes the output
adjoint back onto them. ``backward()`` walks that record once in reverse
topological order, so every node is visited exactly once and leaves that do
not influence the output keep a zero gradient. One graph is built per
training step and never shared across threads.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _contig(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray promotes 0-d to 1-d; keep scalar shapes intact
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


def _as_f64(data) -> np.ndarray:
    return _contig(np.asarray(data, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense f64 value node; construction rejects NaN/Inf."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected at tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 bwd: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        # iterative topological sort; recursion would overflow on long chains
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones(self.data.shape, dtype=np.float64))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        a, b = self, as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, as_tensor(other)

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        return self * (as_tensor(other) ** -1.0)

    def __rtruediv__(self, other):
        return as_tensor(other) * (self ** -1.0)

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)
        out_data = a.data ** p

        def bwd(g):
            if a.requires_grad:
                a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(out_data, (a,), bwd)

    def __matmul__(self, other):
        a, b = self, as_tensor(other)
        out_data = a.data @ b.data

        def bwd(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                if a.requires_grad:
                    a._accum(g * bd)
                if b.requires_grad:
                    b._accum(g * ad)
                return
            # promote vector operands so one batched rule covers every case
            a2 = ad if ad.ndim > 1 else ad[None, :]
            b2 = bd if bd.ndim > 1 else bd[:, None]
            g2 = g
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if a.requires_grad:
                ga = _unbroadcast(g2 @ b2.swapaxes(-1, -2), a2.shape)
                a._accum(ga[0] if ad.ndim == 1 else ga)
            if b.requires_grad:
                gb = _unbroadcast(a2.swapaxes(-1, -2) @ g2, b2.shape)
                b._accum(gb[:, 0] if bd.ndim == 1 else gb)

        return Tensor._from_op(out_data, (a, b), bwd)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        a = self
        out_data = a.data.reshape(*shape)

        def bwd(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._from_op(out_data, (a,), bwd)

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        out_data = a.data.swapaxes(ax1, ax2)

        def bwd(g):
            a._accum(g.swapaxes(ax1, ax2))

        return Tensor._from_op(out_data, (a,), bwd)

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]

        def bwd(g):
            if a.requires_grad:
                buf = np.zeros(a.data.shape, dtype=np.float64)
                np.add.at(buf, key, g)
                a._accum(buf)

        return Tensor._from_op(_contig(out_data), (a,), bwd)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._from_op(np.asarray(out_data, dtype=np.float64), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accum(g * out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def log(self):
        a = self
        out_data = np.log(a.data)

        def bwd(g):
            a._accum(g / a.data)

        return Tensor._from_op(out_data, (a,), bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accum(g * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (a,), bwd)

    def relu(self):
        a = self
        out_data = np.maximum(a.data, 0.0)

        def bwd(g):
            a._accum(g * (a.data > 0.0))

        return Tensor._from_op(out_data, (a,), bwd)

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only strictly inside (lo, hi)."""
        a = self
        out_data = np.clip(a.data, lo, hi)

        def bwd(g):
            a._accum(g * ((a.data > lo) & (a.data < hi)))

        return Tensor._from_op(out_data, (a,), bwd)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; at ties the gradient is routed to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor._from_op(out_data, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tensors, bwd)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]`` (embedding gather, scatter-add backward)."""
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            buf = np.zeros(table.data.shape, dtype=np.float64)
            np.add.at(buf, idx, g)
            table._accum(buf)

    return Tensor._from_op(_contig(out_data), (table,), bwd)


def gather_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis; ``indices.shape == x.shape[:-1]``."""
    idx = np.asarray(indices)
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def bwd(g):
        if x.requires_grad:
            buf = np.zeros(x.data.shape, dtype=np.float64)
            np.put_along_axis(buf, expanded, np.expand_dims(g, -1), axis=-1)
            x._accum(buf)

    return Tensor._from_op(_contig(out_data), (x,), bwd)


def softmax_t(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accum(out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), bwd)


def log_softmax_t(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        if x.requires_grad:
            sm = np.exp(out_data)
            x._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (x,), bwd)


def add_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (attention masks etc.)."""
    a = x
    out_data = x.data + const

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), bwd)
