"""Dense tensors with define-by-run, tape-based reverse-mode autodiff.

Every differentiable operation executed while one of its inputs requires a
gradient appends a :class:`Node` to the calling thread's active :class:`Tape`.
:func:`backward` walks that tape once in reverse recording order and then
clears it, so a fresh graph is recorded for every training step.

Training runs in float32; float64 exists for finite-difference and oracle
tests (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError


_state = threading.local()
_default_dtype = np.float32


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Execute operations without recording anything on the tape."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out: "Tensor", parents: tuple, backward_fn: Callable, tape: "Tape"):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            # break tensor <-> node cycles so memory is released promptly
            node.out.node = None
            node.out = None
            node.parents = ()
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)
        if exc[0] is not None:
            self.clear()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
    return stack


def active_tape() -> Tape:
    return _tape_stack()[-1]


class Tensor:
    """An n-dimensional array that can take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self, start: int = 1) -> "Tensor":
        return reshape(self, self.shape[:start] + (-1,))


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = active_tape()
        out.node = Node(out, tuple(parents), backward_fn, tape)
        tape.nodes.append(out.node)
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
    return grad.reshape(shape)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    # python scalars adopt the tensor operand's precision
    if a.dtype != b.dtype:
        if a.ndim == 0 and not a.requires_grad:
            a = Tensor(a.data, dtype=b.dtype)
        elif b.ndim == 0 and not b.requires_grad:
            b = Tensor(b.data, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


def _patches(xpad: np.ndarray, h: int, w: int) -> np.ndarray:
    # (N, C, H+2, W+2) -> (N*H*W, C*9) patch matrix
    n, c = xpad.shape[:2]
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 1) -> Tensor:
    """3x3, stride-1, zero-padded cross-correlation lowered onto a matmul."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if padding != 1:
        raise ContractError("conv2d supports padding=1 only")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects an F x C x 3 x 3 kernel, got {kernel.shape}")
    if x.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    n, c, h, w = x.shape
    f = kernel.shape[0]
    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _patches(xpad, h, w)
    kmat = kernel.data.reshape(f, c * 9)
    out = (cols @ kmat.T).reshape(n, h, w, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, h, w, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
            gpad = np.zeros_like(xpad)
            for i in range(3):
                for j in range(3):
                    gpad[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = gpad[:, :, 1:-1, 1:-1]
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), backward)


def avgpool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2 expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even spatial size, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None] * 0.25, (n, c, h // 2, 2, w // 2, 2))
        return (spread.reshape(x.shape),)

    return _record(out.astype(x.dtype, copy=False), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def custom_grad(forward: Tensor, surrogate_input: Tensor,
                rule: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Pass ``forward``'s value through; route the gradient to ``surrogate_input``.

    The backward pass multiplies the incoming gradient by
    ``rule(surrogate_input)`` elementwise. ``forward`` itself is detached.
    """
    forward, surrogate_input = as_tensor(forward), as_tensor(surrogate_input)
    if forward.shape != surrogate_input.shape:
        raise DimensionError(
            f"custom_grad shape mismatch: forward {forward.shape}, surrogate {surrogate_input.shape}")

    def backward(g):
        return (g * rule(surrogate_input.data),)

    return _record(forward.data, (surrogate_input,), backward)


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Back-propagate a scalar loss through its tape and clear the tape.

    Returns a map from every ``requires_grad`` leaf reached to its gradient;
    the same array is stored on ``leaf.grad``. Contributions from several
    consumers are summed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or node.tape is None or not node.tape.nodes:
        raise ContractError("backward called on an empty tape (loss has no recorded graph)")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    try:
        for rec in reversed(tape.nodes):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    key = id(parent)
                    leaves[key] = parent
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    finally:
        tape.clear()
    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(leaf_grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = Tensor(g, dtype=leaf.dtype)
    return result
