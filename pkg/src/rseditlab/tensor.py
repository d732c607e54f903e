"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node in an implicit graph: the
output tensor keeps references to its parents plus a closure that maps the
output gradient to parent gradients.  ``backward`` linearizes the graph
reachable from a scalar loss into a :class:`GradTape` (creation order is a
topological order, so replaying it reversed visits each op exactly once in
reverse topological order) and accumulates gradients into every
``requires_grad`` leaf.

All data is float64 and row-major; layout ops copy rather than alias, which
is cheap at the tensor sizes this project uses.  Ops are pure, so identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_SEQ = itertools.count()
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _asarray(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Float64 n-d array participating in reverse-mode differentiation.

    ``grad`` is populated on ``requires_grad`` leaves by :func:`backward`;
    intermediate results do not retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._seq = next(_SEQ)

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, recording the edge only when grads can flow."""
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._backward_fn is not None
                                 for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def permute(self, *axes) -> "Tensor":
        return permute(self, *axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


class GradTape:
    """Ordered record of the executed ops reachable from one root tensor.

    ``records`` holds op-output tensors in creation order; since an op is
    always created after its inputs, replaying the list reversed is a valid
    reverse topological order and visits each op exactly once.
    """

    def __init__(self, records: list[Tensor]):
        self.records = records

    @staticmethod
    def from_root(root: Tensor) -> "GradTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or node._backward_fn is None:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return GradTape(nodes)

_ACTIVE_GRADS: list[dict[int, np.ndarray]] = []


def _needs_grad(parent: Tensor) -> bool:
    """Whether any gradient must be produced for ``parent`` during replay."""
    return parent._backward_fn is not None or parent.requires_grad


def _send(parent: Tensor, grad: np.ndarray) -> None:
    """Route a gradient contribution to ``parent`` during a replay.

    Stored buffers are never mutated in place; the same array object may be
    routed to several parents (e.g. by ``add``), so accumulation always
    allocates a fresh sum.
    """
    if parent._backward_fn is not None:
        acc = _ACTIVE_GRADS[-1]
        key = id(parent)
        if key in acc:
            acc[key] = acc[key] + grad
        else:
            acc[key] = grad
    elif parent.requires_grad:
        if parent.grad is None:
            parent.grad = np.zeros_like(parent.data)
        parent.grad += grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every ``requires_grad`` leaf below ``loss``.

    Deterministic given identical op order: the tape is replayed in reverse
    creation order with fixed accumulation order.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = GradTape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    _ACTIVE_GRADS.append(grads)
    try:
        if loss._backward_fn is None:
            if loss.requires_grad:
                _send(loss, grads[id(loss)])
            return
        for node in reversed(tape.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._backward_fn(g)
    finally:
        _ACTIVE_GRADS.pop()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a_shape, b_shape, op: str) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return Tensor.from_op(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if _needs_grad(a):
            _send(a, _unbroadcast(g * b.data, a.shape))
        if _needs_grad(b):
            _send(b, _unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(out_data, (a, b), backward_fn)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    out_data = a.data ** p

    def backward_fn(g):
        _send(a, g * p * a.data ** (p - 1.0))

    return Tensor.from_op(out_data, (a,), backward_fn)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        _send(a, g * out_data)

    return Tensor.from_op(out_data, (a,), backward_fn)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward_fn(g):
        _send(a, g / a.data)

    return Tensor.from_op(out_data, (a,), backward_fn)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


# ---------------------------------------------------------------------------
# contraction / reduction
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    out_data = a.data @ b.data

    def backward_fn(g):
        if _needs_grad(a):
            _send(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if _needs_grad(b):
            _send(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return Tensor.from_op(out_data, (a, b), backward_fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _send(a, np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _send(a, np.broadcast_to(g, a.shape))

    return Tensor.from_op(out_data, (a,), backward_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# layout ops
# ---------------------------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    in_shape = a.shape

    def backward_fn(g):
        _send(a, g.reshape(in_shape))

    return Tensor.from_op(out_data, (a,), backward_fn)


def permute(a, *axes) -> Tensor:
    a = _wrap(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for ndim {a.ndim}")
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward_fn(g):
        _send(a, np.ascontiguousarray(g.transpose(inverse)))

    return Tensor.from_op(out_data, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)):
            raise DimensionError(
                f"concat shapes incompatible along axis {axis}: "
                f"{[t.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _send(t, g[tuple(idx)])

    return Tensor.from_op(out_data, tuple(tensors), backward_fn)


def index_select(a, axis: int, index) -> Tensor:
    """Gather slices of ``a`` along ``axis`` at integer positions ``index``."""
    a = _wrap(a)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer) or index.ndim != 1:
        raise DimensionError("index_select requires a 1-d integer index")
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise DimensionError(
            f"index_select out of range for axis {axis} extent {a.shape[axis]}")
    out_data = np.take(a.data, index, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        _send(a, full)

    return Tensor.from_op(out_data, (a,), backward_fn)


def split(a, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    a = _wrap(a)
    if a.shape[axis] % sections != 0:
        raise DimensionError(
            f"split: axis {axis} extent {a.shape[axis]} not divisible by {sections}")
    step = a.shape[axis] // sections
    outs = []
    for s in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(s * step, (s + 1) * step)
        piece = np.ascontiguousarray(a.data[tuple(idx)])
        lo = s * step

        def backward_fn(g, lo=lo):
            full = np.zeros_like(a.data)
            idx2 = [slice(None)] * a.ndim
            idx2[axis] = slice(lo, lo + step)
            full[tuple(idx2)] = g
            _send(a, full)

        outs.append(Tensor.from_op(piece, (a,), backward_fn))
    return outs
