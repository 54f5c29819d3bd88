"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a read-only numpy buffer. While a :class:`GradientTape`
is active, every primitive whose inputs require gradients appends an entry to
the tape holding its inputs and a vector-Jacobian closure over the saved
activations. :func:`backward` replays the tape in reverse.

Broadcasting follows numpy rules for the elementwise primitives (``add``,
``sub``, ``mul``, ``div``, ``where``) and for the leading (batch) dimensions
of ``matmul``; gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from scipy.special import ndtr

from .enums import Precision
from .errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {Precision.FLOAT64: np.float64, Precision.FLOAT32: np.float32}
_INV_SQRT_2PI = 0.3989422804014327

Operand = Union["Tensor", np.ndarray, float, int]
VJP = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[GradientTape] = []
        self.precision: Precision = Precision.FLOAT64


_state = _State()


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_state.precision])


@contextlib.contextmanager
def precision(value: Precision | str) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = _state.precision
    _state.precision = Precision(value)
    try:
        yield
    finally:
        _state.precision = previous


class Tensor:
    """An immutable n-dimensional array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    data: np.ndarray
    requires_grad: bool
    name: str | None

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        *,
        dtype: np.dtype | type | None = None,
        name: str | None = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=dtype or default_dtype())
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        array.setflags(write=False)
        out.data = array
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def mT(self) -> Tensor:
        return transpose(self, _swap_last(self.ndim))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{grad}{name})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def __setitem__(self, index: Any, value: Any) -> None:
        raise TypeError("Tensor is immutable; build a new tensor with where() or concat()")

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


class GradientTape:
    """Ordered record of the primitives applied to tensors that require gradients.

    Use as a context manager; tapes nest and are local to the thread that opened them.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> GradientTape:
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)


def active_tape() -> GradientTape | None:
    return _state.tapes[-1] if _state.tapes else None


class GradientMap(Mapping[int, np.ndarray]):
    """Gradients produced by :func:`backward`, looked up by tensor.

    Tensors the loss does not depend on get an exact zero array of their own shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]) -> None:
        self._grads = grads
        self._owners = owners

    def __getitem__(self, key: Tensor | int) -> np.ndarray:
        if isinstance(key, Tensor):
            grad = self._grads.get(id(key))
            return np.zeros_like(key.data) if grad is None else grad
        return self._grads[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def __contains__(self, key: object) -> bool:
        if isinstance(key, Tensor):
            return id(key) in self._grads
        return key in self._grads

    def named(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self[tensor] for name, tensor in params.items()}


def backward(loss: Tensor, tape: GradientTape | None = None) -> GradientMap:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape`` (the active tape by default)."""
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward() requires a GradientTape")
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        upstream = grads.get(id(entry.output))
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.vjp(upstream), strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                owners[key] = tensor
    return GradientMap(grads, owners)


def as_tensor(value: Operand, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _finish(op: str, array: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"primitive '{op}'")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad)
    tape = active_tape()
    if requires_grad and tape is not None:
        tape.record(TapeEntry(op, out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    if ndim >= 2:
        axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _normalise_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise sum, numpy broadcasting (also used for bias addition)."""
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    _broadcast_shape("add", x, y)

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _finish("add", x.data + y.data, (x, y), vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    _broadcast_shape("sub", x, y)

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _finish("sub", x.data - y.data, (x, y), vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    _broadcast_shape("mul", x, y)

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _finish("mul", x.data * y.data, (x, y), vjp)


def div(a: Operand, b: Operand) -> Tensor:
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    _broadcast_shape("div", x, y)
    with np.errstate(all="ignore"):
        out = x.data / y.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gx = g / y.data
        return _unbroadcast(gx, x.shape), _unbroadcast(-gx * out, y.shape)

    return _finish("div", out, (x, y), vjp)


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError("matmul", x.shape, y.shape)
    try:
        np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", x.shape, y.shape) from None

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gx = g @ np.swapaxes(y.data, -1, -2) if x.requires_grad else None
        gy = np.swapaxes(x.data, -1, -2) @ g if y.requires_grad else None
        return (
            None if gx is None else _unbroadcast(gx, x.shape),
            None if gy is None else _unbroadcast(gy, y.shape),
        )

    return _finish("matmul", np.matmul(x.data, y.data), (x, y), vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _finish("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _finish("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the standard normal CDF."""
    cdf = ndtr(a.data)
    out = a.data * cdf

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _finish("gelu", out.astype(a.dtype, copy=False), (a,), vjp)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to ``[low, high]``; the gradient is zero where the clamp is active."""
    inside = (a.data >= low) & (a.data <= high)
    return _finish("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def sum_(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _normalise_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), vjp)


def mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _normalise_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis``; all other axes must agree."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    parts = tuple(as_tensor(t) for t in tensors)
    first = parts[0]
    ax = axis % first.ndim
    for other in parts[1:]:
        if other.ndim != first.ndim or any(
            n != m for i, (n, m) in enumerate(zip(first.shape, other.shape, strict=True)) if i != ax
        ):
            raise ShapeError("concat", first.shape, other.shape)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return tuple(np.split(g, bounds, axis=ax))

    return _finish("concat", np.concatenate([p.data for p in parts], axis=ax), parts, vjp)


def take(a: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the gradient."""
    if isinstance(index, Tensor):
        index = index.data
    out = np.array(a.data[index])
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is None for p in parts)

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _finish("slice", out, (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, perm)
    inverse = tuple(np.argsort(perm))
    return _finish(
        "transpose", np.transpose(a.data, perm), (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _finish("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """``a`` where ``mask`` is true, ``b`` elsewhere; ``mask`` is a constant."""
    x = as_tensor(a, b if isinstance(b, Tensor) else None)
    y = as_tensor(b, x)
    cond = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(cond.shape, x.shape, y.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, x.shape, y.shape) from None

    def vjp(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(np.where(cond, g, 0.0), x.shape), _unbroadcast(
            np.where(cond, 0.0, g), y.shape
        )

    return _finish("where", np.where(cond, x.data, y.data), (x, y), vjp)
