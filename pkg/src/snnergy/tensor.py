"""Dense tensors with tape-based reverse-mode automatic differentiation.

Storage is a numpy array (float32 by default). Every differentiable op is a
:class:`Function` subclass whose ``apply`` runs the numpy forward and, when
gradients are needed, appends one node to the active :class:`GradTape`.
``backward`` walks the tape in reverse append order, so no graph sort is
needed and the tape is only cleared when ``reset`` is called.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from typing import Any, Iterator, Sequence

import numpy as np

from .instrument import count_ops, record_alloc


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("snnergy_dtype", default=np.float32)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("snnergy_grad", default=True)
_debug: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "snnergy_debug", default=os.environ.get("SNNERGY_DEBUG", "") not in ("", "0")
)


def default_dtype() -> type:
    return _dtype.get()


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block (float64 for gradient checks)."""
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def debug_enabled() -> bool:
    return _debug.get()


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Turn on invariant scans (spike binarity) that release runs skip."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


def set_debug(enabled: bool) -> None:
    _debug.set(enabled)


class GradTape:
    """Append-only record of differentiable ops in execution order."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Function, tuple[Tensor, ...], Tensor]] = []

    def append(self, fn: "Function", inputs: tuple["Tensor", ...], out: "Tensor") -> None:
        self.nodes.append((fn, inputs, out))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape: contextvars.ContextVar[GradTape] = contextvars.ContextVar("snnergy_tape", default=GradTape())


def get_tape() -> GradTape:
    return _tape.get()


@contextlib.contextmanager
def using_tape(tape: GradTape | None = None) -> Iterator[GradTape]:
    """Record onto a private tape (one per worker or per test)."""
    tape = GradTape() if tape is None else tape
    token = _tape.set(tape)
    try:
        yield tape
    finally:
        _tape.reset(token)


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Numpy broadcasting restricted to singleton dims and left padding."""
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")
        out.append(max(x, y))
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing a forward broadcast."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` which maps
    the upstream gradient to one gradient (or ``None``) per input.
    """

    def __init__(self) -> None:
        self.saved: tuple[Any, ...] = ()
        self.needs: tuple[bool, ...] = ()

    def save(self, *values: Any) -> None:
        self.saved = values

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", out_cls: type | None = None, **kwargs: Any) -> "Tensor":
        fn = cls()
        fn.needs = tuple(t.requires_grad for t in inputs)
        data = fn.forward(*(t.data for t in inputs), **kwargs)
        record_alloc(data.nbytes)
        track = _grad_enabled.get() and any(fn.needs)
        out = (out_cls or Tensor)._from_op(data, track)
        if track:
            _tape.get().append(fn, inputs, out)
        return out


class Tensor:
    """Dense n-dimensional real array with an optional gradient.

    Args:
        data: Anything ``np.asarray`` accepts; cast to the active precision.
        requires_grad: Whether ``backward`` should populate ``.grad``.
        name: Optional label used in error messages and checkpoints.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_dtype.get())
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"shape entries must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._validate()
        return t

    def _validate(self) -> None:
        pass

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"{type(self).__name__}(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operators --------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return Index.apply(self, index=index)

    def sum(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order: Any) -> "Tensor":
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def transpose(self, a: int = -2, b: int = -1) -> "Tensor":
        order = list(range(self.ndim))
        order[a], order[b] = order[b], order[a]
        return permute(self, order)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data: Any, name: str | None = None) -> None:
        super().__init__(data, requires_grad=True, name=name)


class SpikeTensor(Tensor):
    """Tensor whose elements are exactly 0 or 1.

    The scan runs only when debug checks are on; release runs trust the
    producing neuron.
    """

    def _validate(self) -> None:
        if _debug.get() and not _smooth_ok.get():
            check_binary(self.data)

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        super().__init__(data, requires_grad, name)
        self._validate()


# Set by the neuron module while the surrogate-smoothed forward is active.
_smooth_ok: contextvars.ContextVar[bool] = contextvars.ContextVar("snnergy_smooth_ok", default=False)


def check_binary(arr: np.ndarray) -> None:
    bad = np.count_nonzero((arr != 0) & (arr != 1))
    if bad:
        raise ContractError(f"spike tensor holds {bad} non-binary values")


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._from_op(np.asarray(x, dtype=_dtype.get()), False)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Calling twice without ``GradTape.reset`` and ``zero_grad`` adds the
    gradients a second time.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    tape = _tape.get()
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for fn, inputs, out in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        grads = fn.backward(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = pending.get(key)
            pending[key] = gi if prev is None else prev + gi
    # Whatever remains belongs to leaves (tensors not produced on the tape).
    index = {id(t): t for _, inputs, _ in tape.nodes for t in inputs}
    index[id(loss)] = loss
    for key, g in pending.items():
        t = index.get(key)
        if t is not None and t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# -- elementwise ------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        shape = broadcast_shape(a.shape, b.shape)
        self.save(a.shape, b.shape)
        count_ops(int(np.prod(shape)))
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        shape = broadcast_shape(a.shape, b.shape)
        self.save(a.shape, b.shape)
        count_ops(int(np.prod(shape)))
        return a - b

    def backward(self, grad):
        sa, sb = self.saved
        return unbroadcast(grad, sa), unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        shape = broadcast_shape(a.shape, b.shape)
        self.save(a, b)
        count_ops(int(np.prod(shape)))
        return a * b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad * b, a.shape) if self.needs[0] else None
        gb = unbroadcast(grad * a, b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.save(a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad / b, a.shape) if self.needs[0] else None
        gb = unbroadcast(-grad * a / (b * b), b.shape) if self.needs[1] else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product with singleton broadcasting."""
    return Mul.apply(a, b)


# -- reductions -------------------------------------------------------------


def _norm_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise IndexError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        axes = _norm_axes(axis, a.ndim)
        self.save(a.shape, axes, keepdims)
        count_ops(a.size)
        return np.asarray(a.sum(axis=axes, keepdims=keepdims))

    def backward(self, grad):
        shape, axes, keepdims = self.saved
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        axes = _norm_axes(axis, a.ndim)
        self.save(a.shape, axes, keepdims, int(np.prod([a.shape[i] for i in axes])))
        count_ops(a.size)
        return np.asarray(a.mean(axis=axes, keepdims=keepdims))

    def backward(self, grad):
        shape, axes, keepdims, n = self.saved
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad / n, shape),)


def reduce(a: Tensor, axis: int, mode: str = "sum") -> Tensor:
    """Sum or mean over ``axis``; the reduced axis is kept with size 1."""
    if mode == "sum":
        return Sum.apply(a, axis=axis, keepdims=True)
    if mode == "mean":
        return Mean.apply(a, axis=axis, keepdims=True)
    raise ValueError(f"unknown reduce mode {mode!r}")


# -- linear algebra ---------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not contract")
        lead = broadcast_shape(a.shape[:-2], b.shape[:-2])
        self.save(a, b)
        count_ops(int(np.prod(lead)) * a.shape[-2] * a.shape[-1] * b.shape[-1])
        return a @ b

    def backward(self, grad):
        a, b = self.saved
        ga = unbroadcast(grad @ np.swapaxes(b, -1, -2), a.shape) if self.needs[0] else None
        gb = unbroadcast(np.swapaxes(a, -1, -2) @ grad, b.shape) if self.needs[1] else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over broadcastable leading dims."""
    return MatMul.apply(a, b)


# -- shape ops ----------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape=()):
        shape = tuple(int(s) for s in shape)
        if -1 in shape:
            known = int(np.prod([s for s in shape if s != -1]))
            if known == 0 or a.size % known:
                raise DimensionError(f"cannot reshape {a.shape} to {shape}")
            shape = tuple(a.size // known if s == -1 else s for s in shape)
        if int(np.prod(shape)) != a.size:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        self.save(a.shape)
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved[0]),)


class Permute(Function):
    def forward(self, a, order=()):
        order = tuple(int(o) for o in order)
        if sorted(order) != list(range(a.ndim)):
            raise DimensionError(f"{order} is not a permutation of the axes of {a.shape}")
        self.save(np.argsort(order))
        # Materialized so later in-place consumers never alias the source.
        return np.ascontiguousarray(a.transpose(order))

    def backward(self, grad):
        return (grad.transpose(self.saved[0]),)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a: Tensor, order: Sequence[int]) -> Tensor:
    return Permute.apply(a, order=tuple(order))


class Index(Function):
    def forward(self, a, index=None):
        self.save(a.shape, a.dtype, index)
        out = a[index]
        return np.array(out, copy=True) if np.ndim(out) else np.asarray(out).reshape(())

    def backward(self, grad):
        shape, dtype, index = self.saved
        g = np.zeros(shape, dtype=dtype)
        np.add.at(g, index, grad)
        return (g,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.save(axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        axis, sizes = self.saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


class Identity(Function):
    def forward(self, a):
        return a

    def backward(self, grad):
        return (grad,)


def as_spikes(t: Tensor) -> SpikeTensor:
    """Re-type a tensor known to be binary; the check runs in debug mode."""
    if isinstance(t, SpikeTensor):
        return t
    return Identity.apply(t, out_cls=SpikeTensor)  # type: ignore[return-value]
