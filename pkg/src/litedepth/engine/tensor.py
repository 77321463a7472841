"""Reverse-mode autodiff over dense numpy arrays.

A Tensor wraps an ndarray plus an optional gradient accumulator. Ops build a
DAG by recording parent tensors and a closure that maps the output gradient to
parent gradients. ``backward()`` walks the DAG in reverse topological order.

A graph and its tensors belong to one logical thread; distinct graphs may run
on distinct threads concurrently.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "default_dtype",
    "grad_enabled",
    "maximum",
    "minimum",
    "no_grad",
    "set_default_dtype",
    "stack",
    "unary_op",
    "using_dtype",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def _dtype_name() -> str:
    return getattr(_state, "dtype", "f32")


def set_default_dtype(name: str) -> None:
    """Select the precision used for new parameters/constants ("f32" or "f64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = name


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_dtype_name()])


@contextlib.contextmanager
def using_dtype(name: str):
    prev = _dtype_name()
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-d array with optional gradient tracking.

    Invariants: ``grad`` (once populated) has the same shape as ``data``; the
    backward pass accumulates into ``grad``, never overwrites it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=default_dtype())
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---------------------------------------------------------------- backward

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The loss must be scalar. Repeated calls accumulate into ``grad``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")

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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # --------------------------------------------------------------- op helper

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._from_op(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(a.data ** p, (a,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
            raise ValueError(
                f"matmul inner dimensions disagree: {a.shape} @ {b.shape} "
                f"(axis {a.ndim - 1} vs axis {max(b.ndim - 2, 0)})")

        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._from_op(a.data @ b.data, (a, b), bw)

    # ------------------------------------------------------------- elementwise

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._from_op(out_data, (a,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._from_op(out_data, (a,), lambda g: (g * 0.5 / out_data,))

    def abs(self):
        a = self
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def clamp_min(self, lo: float):
        return maximum(self, float(lo))

    # -------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % a.ndim for ax in axes)
                shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
                g = g.reshape(shape)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._from_op(out_data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for ax in axes:
                count *= self.shape[ax % self.ndim]
        if count == 0:
            raise ValueError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---------------------------------------------------------------- reshapes

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        in_shape = a.shape
        return Tensor._from_op(a.data.reshape(shape), (a,),
                               lambda g: (g.reshape(in_shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return Tensor._from_op(a.data.transpose(axes), (a,),
                               lambda g: (g.transpose(inv),))

    def swap_last_axes(self):
        a = self
        return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,),
                               lambda g: (np.swapaxes(g, -1, -2),))

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(a.data[idx], (a,), bw)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        take_a = a.data >= b.data
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return Tensor._from_op(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        take_a = a.data <= b.data
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return Tensor._from_op(np.minimum(a.data, b.data), (a, b), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; off-axis shapes must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty tensor list")
    if len(ts) == 1:
        return ts[0]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis % t.ndim and m != n:
                raise ValueError(f"concat shapes disagree on axis {ax}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = []
    for t in ts:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def unary_op(x: Tensor, fn: Callable[[np.ndarray], np.ndarray],
             grad_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Build a custom elementwise op: y = fn(x), dy/dx = grad_fn(x)."""
    x = as_tensor(x)
    return Tensor._from_op(fn(x.data), (x,), lambda g: (g * grad_fn(x.data),))
