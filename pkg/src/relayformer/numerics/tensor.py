"""Dense row-major tensors backed by numpy with a reverse-mode gradient tape.

Every forward op returns a new :class:`Tensor` holding a closure that maps
the upstream gradient to one gradient per parent. :meth:`Tensor.backward`
replays those closures in reverse topological order and accumulates into
the ``grad`` field of leaves that require gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from relayformer.errors import ContractError, NonFiniteError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_state = {"grad": True, "check_finite": True}
_mac_counters: list[dict] = []

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ContractError(f"unsupported dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in _NAMES:
        raise ContractError(f"unsupported dtype {dt}")
    return dt


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def count_macs():
    """Instrument forward ops and yield a dict of accumulated cost.

    ``matmul`` adds batch*M*K*N multiply-accumulates; softmax, layer norm,
    GELU and sigmoid add one unit per output element (the analytic cost
    model uses the same convention).
    """
    counter = {"matmul": 0, "elementwise": 0}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)
        counter["total"] = counter["matmul"] + counter["elementwise"]


def record_macs(kind: str, amount: int) -> None:
    for counter in _mac_counters:
        counter[kind] += int(amount)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
        for i in items
    )


class Tensor:
    """An n-dimensional real array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, (np.ndarray, np.generic)) and data.dtype in _NAMES:
            dt = data.dtype
        else:
            dt = _as_dtype(dtype)
        arr = np.asarray(data, dtype=dt)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.op = ""

    # -- construction -----------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Iterable["Tensor"], backward: Backward, op: str = "") -> "Tensor":
        """Wrap the result of a forward computation and record it on the tape."""
        parents = tuple(parents)
        if _state["check_finite"] and not np.all(np.isfinite(data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise NonFiniteError(f"non-finite output from {op or 'op'}")
        out = cls(data)
        out.op = op
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        dt = _as_dtype(dtype)
        src = self.data.dtype
        return Tensor.from_op(
            self.data.astype(dt), (self,), lambda g: (g.astype(src),), "astype"
        )

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                pg = pg.astype(parent.data.dtype, copy=False)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- elementwise arithmetic ------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _binary_shape(self, other: "Tensor") -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {self.shape} with {other.shape}") from None

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._binary_shape(other)
        return Tensor.from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._binary_shape(other)
        return Tensor.from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._binary_shape(other)
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._binary_shape(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor.from_op(out, (self, other), lambda g: (g / b, -g * out / b), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        x = self.data
        p = float(exponent)
        return Tensor.from_op(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor.from_op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # -- contraction ------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._coerce(other))

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(self._coerce(other), self)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _norm_axes(axis, self.ndim)

        def backward(g):
            if not keepdims and axes:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor.from_op(self.data.sum(axis=axes, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = math.prod(self.shape[a] for a in axes) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ----------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {src} to {shape}") from None
        return Tensor.from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor.from_op(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),), "swapaxes"
        )

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape) -> "Tensor":
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {self.shape} to {tuple(shape)}") from None
        return Tensor.from_op(np.array(out), (self,), lambda g: (g,), "broadcast")

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            idx = idx.data
        shape, dt = self.shape, self.data.dtype
        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros(shape, dtype=dt)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor.from_op(np.array(self.data[idx]), (self,), backward, "getitem")


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_macs("matmul", math.prod(batch) * m * k * n)
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(x @ y, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ndim = tensors[0].ndim
    ax = axis % ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward, "stack")
