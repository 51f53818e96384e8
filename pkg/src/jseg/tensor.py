"""Dense n-d arrays with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a numpy buffer (float64 by default, float32 opt-in).
While a ``Tape`` is active, every operation that touches a tracked tensor
appends a node holding the output and a backward closure.  ``backward``
seeds the root with 1 and replays the nodes in reverse recorded order,
accumulating into ``.grad`` buffers; reverse recording order is a valid
topological order because the tape is append-only during the forward
pass.  Replay is purely sequential, so gradients are bit-reproducible.

Tape recording is confined to one thread per forward pass (the active
tape lives in thread-local storage); tensors themselves are treated as
immutable once created and may be shared freely across threads.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_tls = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch the default scalar type (float32 trades accuracy for speed)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations for one reverse-mode pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted (unbalanced enter/exit)")
        stack.pop()

    def record(self, out: "Tensor", backward_fn) -> None:
        self.nodes.append((out, backward_fn))

    def backward(self, root: "Tensor") -> None:
        """Populate ``.grad`` of every tracked tensor reachable from ``root``.

        ``root`` must be scalar (one element).  The tape is cleared
        afterwards; a second backward needs a fresh forward pass.
        """
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.shape}"
            )
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for out, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            fn(g)
        self.nodes.clear()


def backward(root: "Tensor") -> None:
    """Run reverse-mode on the innermost active tape (see ``Tape.backward``)."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called without an active tape")
    tape.backward(root)


class Tensor:
    """Immutable dense array, optionally participating in differentiation."""

    __slots__ = ("data", "grad", "tracked")

    def __init__(self, data, tracked: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)

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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, tracked=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.tracked:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    # arithmetic sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses trailing-dimension broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"incompatible shapes {a.shape} and {b.shape}: {exc}"
        ) from exc

    out = Tensor(out_data, dtype=out_data.dtype)

    def _backward(g):
        if a.tracked:
            a.accumulate_grad(_unbroadcast(bwd_a(g, a.data, b.data), a.shape))
        if b.tracked:
            b.accumulate_grad(_unbroadcast(bwd_b(g, a.data, b.data), b.shape))

    return _record(out, (a, b), _backward)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b) -> Tensor:
    b_t = _as_tensor(b)
    if np.any(b_t.data == 0.0):
        raise NumericError("division by exact zero")
    return _binary(
        a,
        b_t,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def maximum(a, b) -> Tensor:
    # ties route the gradient to the first operand
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
    )


def _unary(a, fwd, bwd) -> Tensor:
    a = _as_tensor(a)
    out_data = fwd(a.data)
    out = Tensor(out_data, dtype=out_data.dtype)

    def _backward(g):
        a.accumulate_grad(bwd(g, a.data, out_data))

    return _record(out, (a,), _backward)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0))


def texp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def tlog(a) -> Tensor:
    """Natural log; defined for positive inputs only."""
    return _unary(a, np.log, lambda g, x, y: g / x)


def tabs(a) -> Tensor:
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def tsqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda g, x, y: g * (0.5 / y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input magnitude
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid, lambda g, x, y: g * y * (1.0 - y))


def softplus(a) -> Tensor:
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda g, x, y: g * _sigmoid(x),
    )


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}
_ELEMENTWISE_UNARY = {
    "relu": relu,
    "softplus": softplus,
    "exp": texp,
    "log": tlog,
    "abs": tabs,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (broadcasting, gradient-aware)."""
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ContractError(f"elementwise '{op_kind}' needs two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ContractError(f"elementwise '{op_kind}' is unary")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ContractError(f"unknown elementwise op '{op_kind}'")


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def _backward(g):
        if a.tracked:
            a.accumulate_grad(g @ b.data.T)
        if b.tracked:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), _backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    expand = _reduction_expander(a.shape, axis, keepdims)

    def _backward(g):
        a.accumulate_grad(np.broadcast_to(expand(g), a.shape).copy())

    return _record(out, (a,), _backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else _axis_count(a.shape, axis)
    expand = _reduction_expander(a.shape, axis, keepdims)

    def _backward(g):
        a.accumulate_grad(np.broadcast_to(expand(g) / count, a.shape).copy())

    return _record(out, (a,), _backward)


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _reduction_expander(shape, axis, keepdims):
    if axis is None or keepdims:
        return lambda g: g.reshape(
            tuple(1 for _ in shape) if axis is None and not keepdims else g.shape
        )
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return lambda g: g.reshape(kept)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}: {exc}") from exc
    old_shape = a.shape

    def _backward(g):
        a.accumulate_grad(g.reshape(old_shape))

    return _record(out, (a,), _backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def _backward(g):
        a.accumulate_grad(g.transpose(inverse))

    return _record(out, (a,), _backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat failed: {exc}") from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(idx)])

    return _record(out, tensors, _backward)
