"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation produces a `Node` that remembers its inputs and a
backward closure. `Tape.from_output` collects the nodes reachable from a result
in execution order and `Tape.replay` walks them once, in reverse.
"""
import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ShapeError

DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("seq", "op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward: BackwardFn):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(values, Tensor):
            values = values.values
        array = np.asarray(values, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # --- backward --------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)

    # --- arithmetic ------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        from core.autodiff.functional import matmul
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def record(op: str, values: np.ndarray, inputs: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    inputs = tuple(inputs)
    tracked = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=tracked, dtype=values.dtype)
    if tracked:
        out._node = Node(op, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- tape ------------------------------------------------------------------


class Tape:
    """Ordered record of the operations that produced one output."""

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        nodes = {}
        stack = [output]
        seen = set()
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            node = tensor._node
            if node is None:
                continue
            nodes[node.seq] = node
            stack.extend(t for t in node.inputs if t.requires_grad)
        return cls([nodes[k] for k in sorted(nodes)])

    def replay(self, output: Tensor, seed: np.ndarray):
        pending = {id(output): seed}
        touched = {id(output): output}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            _accumulate(node.output, grad)
            input_grads = node.backward(grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                touched[key] = tensor
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
        # whatever is left belongs to leaves
        for key, grad in pending.items():
            _accumulate(touched[key], grad)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor, grad: np.ndarray | None = None):
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    if not loss.requires_grad:
        return
    Tape.from_output(loss).replay(loss, np.asarray(grad, dtype=loss.dtype))


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return record("add", a.values + b.values, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return record("sub", a.values - b.values, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)
    return record("mul", a.values * b.values, (a, b), _backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def _backward(g):
        return (unbroadcast(g / b.values, a.shape),
                unbroadcast(-g * a.values / (b.values * b.values), b.shape))
    return record("div", a.values / b.values, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.values, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def _backward(g):
        return (g * exponent * a.values ** (exponent - 1),)
    return record("pow", a.values ** exponent, (a,), _backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.values), (a,), lambda g: (g / a.values,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return record("relu", np.where(mask, a.values, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = stable_sigmoid(a.values)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


# --- reductions and shape ----------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.values, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return record("sum", np.asarray(out), (a,), _backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.values, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)
    return record("mean", np.asarray(out), (a,), _backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from e
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.values, axes)
    inverse = None if axes is None else np.argsort(axes)
    return record("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along `axis`; gradient is scattered back with duplicates summed."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.values, indices, axis=axis)

    def _backward(g):
        grad = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (grad,)
    return record("take", out, (a,), _backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([p.values for p in parts], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))
    return record("stack", out, tuple(parts), _backward)
