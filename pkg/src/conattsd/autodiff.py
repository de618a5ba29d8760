"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a fresh, read-only :class:`Tensor`.  When any input
tracks gradients the output remembers its parents together with a closure
that maps the output gradient to one gradient per parent.  A :class:`Tape`
orders the recorded graph topologically and replays it backwards.

Precision is a run-mode switch: use ``precision(64)`` for verification and
``precision(32)`` for training.  Inside ``verification()`` every produced
value is checked for NaN/Inf.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar("dtype", default=np.dtype(np.float64))
_CHECK_FINITE: contextvars.ContextVar[bool] = contextvars.ContextVar("check_finite", default=False)

_BITS_TO_DTYPE = {32: np.dtype(np.float32), 64: np.dtype(np.float64)}


def dtype_for_bits(bits: int) -> np.dtype:
    try:
        return _BITS_TO_DTYPE[int(bits)]
    except (KeyError, ValueError):
        raise ContractError(f"precision must be 32 or 64, got {bits!r}") from None


def get_default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(bits: int) -> Iterator[np.dtype]:
    """Set the dtype used for tensors built from Python data."""
    token = _DTYPE.set(dtype_for_bits(bits))
    try:
        yield _DTYPE.get()
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def verification() -> Iterator[None]:
    """Raise :class:`NumericError` whenever an operation produces NaN or Inf."""
    token = _CHECK_FINITE.set(True)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DTYPE.get()
        arr = np.array(data, dtype=dtype, copy=True)
        _seal(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def _seal(arr: np.ndarray) -> None:
    if 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
    if _CHECK_FINITE.get() and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in tensor of shape {arr.shape}")
    arr.flags.writeable = False


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants; arrays adopt the dtype of ``like`` when given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Build the output node of a primitive operation.

    ``backward`` receives the gradient of the output and returns one gradient
    (or ``None``) per parent, in order.  Layers use this to register fused
    primitives next to the ones defined here.
    """
    out = Tensor.__new__(Tensor)
    if not isinstance(data, np.ndarray) or not data.flags.owndata:
        data = np.array(data, copy=True)
    _seal(data)
    out.data = data
    out.name = None
    tracked = any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return from_op(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return from_op(x.data * c, (x,), lambda g: (g * c,))


def one_minus(x: Tensor) -> Tensor:
    return from_op(1.0 - x.data, (x,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch extents {a.shape} and {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return from_op(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------- elementwise
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return from_op(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so large |x| never overflows exp.
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return from_op(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "one_minus": one_minus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "neg": neg,
}


def elementwise(x: Tensor, kind: str, c: float | None = None) -> Tensor:
    """Named elementwise map; ``kind='scale'`` multiplies by ``c``."""
    if kind == "scale":
        if c is None:
            raise ContractError("scale needs a constant c")
        return scale(x, c)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return from_op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return from_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log-softmax via log-sum-exp."""
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return from_op(out, (x,), backward)


# ------------------------------------------------------------------ reshaping
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return from_op(out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return from_op(out, (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    """Slice or index; the gradient is scattered back into a zero array."""
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"index {index!r} invalid for shape {x.shape}: {exc}") from None
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return from_op(np.array(out, copy=True), (x,), backward)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    return getitem(x, index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise ShapeError("cannot concat 0-d tensors")
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: mismatched extents {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))]

    return from_op(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in tensors]}")
    axis = axis % (len(shape) + 1)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, k, axis=axis) for k in range(len(tensors))]

    return from_op(out, tensors, backward)


# ------------------------------------------------------------------- backward
class Tape:
    """Topologically ordered record of the graph that produced ``loss``."""

    def __init__(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.is_leaf:
            raise ContractError("backward called on a tensor with no recorded operations")
        self.loss = loss
        self.nodes = _topological_order(loss)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> dict[int, np.ndarray]:
        """Replay in reverse; returns ``{id(leaf): gradient}`` for tracked leaves."""
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones(self.loss.shape, dtype=self.loss.dtype)}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad:
                    leaves[id(node)] = g if g is not None else np.zeros(node.shape, dtype=node.dtype)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` for every tracked leaf, keyed by ``id``."""
    return Tape(loss).backward()


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Named gradients; parameters the loss does not touch get zeros."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    found = backward(loss) if not loss.is_leaf else {}
    out = {}
    for name, p in params.items():
        g = found.get(id(p))
        out[name] = np.zeros(p.shape, dtype=p.dtype) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


# ------------------------------------------------------- finite differences
def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst elementwise ``|a-b| / max(|a|, |b|, 1e-8)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numerical_gradient(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                       eps: float = 1e-5, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` w.r.t. every entry of ``params``."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    current = dict(params)
    out = {}
    for name in (names if names is not None else params):
        base = params[name]
        flat = base.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for k in range(flat.size):
            values = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[k] += sign * eps
                current[name] = Tensor(bumped.reshape(base.shape), requires_grad=False, dtype=base.dtype)
                values.append(_scalar(f(current)))
            g[k] = (values[0] - values[1]) / (2.0 * eps)
        current[name] = base
        out[name] = g.reshape(base.shape)
    return out


def _scalar(t) -> float:
    value = float(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).reshape(-1)[0])
    if not math.isfinite(value):
        raise NumericError(f"objective returned non-finite value {value}")
    return value


def finite_difference_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                            eps: float = 1e-5) -> float:
    """Worst relative error between tape and central-difference gradients."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    tracked = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}
    loss = f(tracked)
    _scalar(loss)
    analytic = grad(loss, tracked)
    numeric = numerical_gradient(f, {k: Tensor(v.data) for k, v in params.items()}, eps)
    return max((relative_error(analytic[k], numeric[k]) for k in params), default=0.0)
