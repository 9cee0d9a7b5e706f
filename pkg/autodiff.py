"""
Reverse-Mode Differentiation Substrate for Deco-Mamba

This module provides the dense array type every other part of the toolkit
computes with, plus the tape that turns a forward computation into gradients.

Key Features:
- DiffArray: row-major numpy-backed array (float32 or float64) that records the
  primitive which produced it
- GradTape: ordered record of the primitives reachable from a root, replayed in
  reverse topological order exactly once per node
- Elementwise, matrix, shape and reduction primitives with analytic backward rules
- no_grad() for evaluation, count_macs() for complexity accounting
- Non-finite outputs are an error (NumericError), never a silent state

Spatial primitives (convolution, pooling, sampling, normalization) live in
spatial_ops.py and are built on make_node() from this module.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["DiffArray", np.ndarray, float, int]

_thread_state = threading.local()
_numeric_checks_enabled = True


# =============================================================================
# GLOBAL SWITCHES
# =============================================================================

def is_grad_enabled() -> bool:
    """True unless the calling thread is inside no_grad()."""
    return getattr(_thread_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording primitives on the tape (thread-local)."""
    previous = is_grad_enabled()
    _thread_state.grad_enabled = False
    try:
        yield
    finally:
        _thread_state.grad_enabled = previous


def set_numeric_checks(enabled: bool) -> bool:
    """Toggle the finite-output check on every primitive; returns the old value."""
    global _numeric_checks_enabled
    previous = _numeric_checks_enabled
    _numeric_checks_enabled = bool(enabled)
    return previous


def check_finite(values: np.ndarray, op_name: str) -> None:
    if _numeric_checks_enabled and not np.isfinite(values).all():
        raise NumericError(op_name)


# =============================================================================
# MULTIPLY-ACCUMULATE ACCOUNTING
# =============================================================================

class MacCounter:
    """Multiply-accumulate totals per primitive family."""

    def __init__(self):
        self.by_op: Dict[str, int] = {}

    def add(self, op_name: str, macs: int):
        self.by_op[op_name] = self.by_op.get(op_name, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_op.values())


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Collect the MACs of every primitive evaluated inside the block."""
    counter = MacCounter()
    stack = getattr(_thread_state, "mac_counters", None)
    if stack is None:
        stack = []
        _thread_state.mac_counters = stack
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def record_macs(op_name: str, macs: int):
    for counter in getattr(_thread_state, "mac_counters", ()):
        counter.add(op_name, macs)


# =============================================================================
# ARRAY TYPE
# =============================================================================

class DiffArray:
    """Dense N-d array with optional participation in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        values = np.asarray(data)
        if dtype is None:
            dtype = values.dtype if values.dtype in SUPPORTED_DTYPES else DEFAULT_DTYPE
        dtype = np.dtype(dtype)
        if dtype not in SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data: np.ndarray = np.ascontiguousarray(values, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op_name = "leaf"
        self._parents: Tuple["DiffArray", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # --- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{grad_flag}, op={self.op_name})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, dtype=self.dtype)

    def astype(self, dtype) -> "DiffArray":
        return cast(self, dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> "GradTape":
        """Populate .grad on every requires_grad leaf reachable from this array."""
        tape = GradTape(self)
        tape.backward(grad)
        return tape

    # --- operators ----------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def permute(self, *axes): return permute(self, axes[0] if len(axes) == 1 else axes)


class Parameter(DiffArray):
    """Named-by-position learnable (or buffered) array owned by a Module."""

    def __init__(self, data, trainable: bool = True, init: Optional[Callable] = None):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.init = init


def as_array(value: ArrayLike, like: Optional[DiffArray] = None) -> DiffArray:
    """Wrap constants; python and numpy values take the dtype of `like`."""
    if isinstance(value, DiffArray):
        return value
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(value), dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[DiffArray], backward: BackwardFn,
              op_name: str) -> DiffArray:
    """Wrap a primitive's output and, when needed, attach it to the tape."""
    check_finite(data, op_name)
    out = DiffArray(data, dtype=data.dtype if data.dtype in SUPPORTED_DTYPES else None)
    out.op_name = op_name
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# =============================================================================
# TAPE
# =============================================================================

class GradTape:
    """Primitive applications reachable from a root, in topological order."""

    def __init__(self, root: DiffArray):
        self.root = root
        self.nodes: List[DiffArray] = self._topological_order(root)
        self.visit_count = 0

    @staticmethod
    def _topological_order(root: DiffArray) -> List[DiffArray]:
        order: List[DiffArray] = []
        if not root.requires_grad:
            return order
        visited = set()
        stack: List[Tuple[DiffArray, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: Optional[np.ndarray] = None):
        root = self.root
        if not root.requires_grad:
            return
        if grad is None:
            if root.size != 1:
                raise ShapeError("backward", f"an output gradient is required for shape {root.shape}")
            grad = np.ones_like(root.data)
        grad = np.asarray(grad, dtype=root.dtype)
        if grad.shape != root.shape:
            raise ShapeError("backward", f"gradient shape {grad.shape} != output shape {root.shape}")

        pending: Dict[int, np.ndarray] = {id(root): grad}
        for node in reversed(self.nodes):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            self.visit_count += 1
            if node._backward is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
                if parent_grad.shape != parent.shape:
                    raise ShapeError(node.op_name, f"backward produced {parent_grad.shape} for input {parent.shape}")
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


# =============================================================================
# ELEMENTWISE PRIMITIVES
# =============================================================================

def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a: ArrayLike, b: ArrayLike) -> Tuple[DiffArray, DiffArray]:
    if isinstance(a, DiffArray):
        return a, as_array(b, like=a)
    b = as_array(b)
    return as_array(a, like=b), b


def add(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = _binary_operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = _binary_operands(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), backward, "div")


def neg(x: DiffArray) -> DiffArray:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: DiffArray) -> DiffArray:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: DiffArray) -> DiffArray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_node(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: DiffArray) -> DiffArray:
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),), "relu")


def _sigmoid_backward(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out * (1 - out)


def sigmoid(x: DiffArray) -> DiffArray:
    out = special.expit(x.data)
    return make_node(out, (x,), lambda g: (_sigmoid_backward(out, g),), "sigmoid")


def silu(x: DiffArray) -> DiffArray:
    gate = special.expit(x.data)

    def backward(g):
        return (g * gate * (1 + x.data * (1 - gate)),)
    return make_node(x.data * gate, (x,), backward, "silu")


def softplus(x: DiffArray) -> DiffArray:
    out = np.logaddexp(0, x.data)
    return make_node(out, (x,), lambda g: (g * special.expit(x.data),), "softplus")


def tanh(x: DiffArray) -> DiffArray:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def gelu(x: DiffArray) -> DiffArray:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1 + special.erf(x.data / np.sqrt(2)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2 * np.pi)
    return make_node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def clamp_min(x: DiffArray, floor: float) -> DiffArray:
    keep = x.data >= floor
    out = np.where(keep, x.data, np.asarray(floor, dtype=x.dtype))
    return make_node(out, (x,), lambda g: (g * keep,), "clamp_min")


def cast(x: DiffArray, dtype) -> DiffArray:
    dtype = np.dtype(dtype)
    if dtype == x.dtype:
        return x
    return make_node(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),), "cast")


# =============================================================================
# MATRIX AND SHAPE PRIMITIVES
# =============================================================================

def matmul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    record_macs("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), backward, "matmul")


def concat(arrays: Sequence[DiffArray], axis: int = 1) -> DiffArray:
    """Concatenate along an axis (channel axis by default)."""
    if not arrays:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from exc
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_node(out, tuple(arrays), backward, "concat")


def reshape(x: DiffArray, shape) -> DiffArray:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from exc
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: DiffArray, axes: Sequence[int]) -> DiffArray:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_node(out, (x,), lambda g: (np.transpose(g, inverse),), "permute")


def transpose(x: DiffArray, axis_a: int = -2, axis_b: int = -1) -> DiffArray:
    axes = list(range(x.ndim))
    axes[axis_a], axes[axis_b] = axes[axis_b], axes[axis_a]
    return permute(x, axes)


def flip(x: DiffArray, axis: int) -> DiffArray:
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))
    return make_node(out, (x,), lambda g: (np.flip(g, axis=axis),), "flip")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(item is None or item is Ellipsis or isinstance(item, (int, np.integer, slice))
               for item in items)


def getitem(x: DiffArray, index) -> DiffArray:
    """Slicing / indexing; gradient scatters back into a zero array."""
    out = np.ascontiguousarray(x.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_node(out, (x,), backward, "slice")


# =============================================================================
# REDUCTIONS
# =============================================================================

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)
    return make_node(out, (x,), backward, "sum")


def reduce_mean(x: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)
    return make_node(out, (x,), backward, "mean")


def reduce_max(x: DiffArray, axis: Optional[int] = None, keepdims: bool = False) -> DiffArray:
    """Max reduction; the gradient goes to the first maximal element only."""
    if axis is None:
        flat_index = int(np.argmax(x.data))
        out = np.asarray(x.data.reshape(-1)[flat_index])
        if keepdims:
            out = out.reshape((1,) * x.ndim)

        def backward(g):
            full = np.zeros_like(x.data)
            full.reshape(-1)[flat_index] = np.asarray(g).reshape(-1)[0]
            return (full,)
        return make_node(out, (x,), backward, "max")

    index = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, index, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        g = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, index, g, axis=axis)
        return (full,)
    return make_node(out, (x,), backward, "max")


# =============================================================================
# SOFTMAX FAMILY
# =============================================================================

def log_softmax(x: DiffArray, axis: int = 1) -> DiffArray:
    """Numerically stable log-softmax (max subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return make_node(out, (x,), backward, "log_softmax")


def softmax(x: DiffArray, axis: int = 1) -> DiffArray:
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_node(out, (x,), backward, "softmax")
