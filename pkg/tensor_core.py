"""
Tensor core module for the SLAB transformer toolkit.

A minimal dense tensor over numpy arrays with the forward kernels and the
reverse-mode differentiation needed by the normalization, attention and
model modules: elementwise arithmetic with broadcasting, matmul, reductions,
ReLU, GELU, softmax / log-softmax over the last axis and a depth-wise 2-D
convolution.

Each differentiable operation is a ``Function`` subclass with a numpy
``forward`` and a ``backward`` that maps the upstream gradient to one
gradient per input. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients additively.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible with an operation."""
    pass


class EmptyReduction(ValueError):
    """Raised when a reduction covers zero elements."""
    pass


class InvalidKernel(ValueError):
    """Raised when a convolution kernel has an unsupported geometry."""
    pass


class NotScalar(ValueError):
    """Raised when backward is called on a tensor with more than one element."""
    pass


class _GraphState(threading.local):
    """Per-thread recording flags; each thread owns its own graphs."""

    def __init__(self):
        self.grad_enabled = True
        self.mac_counters: List["MacCounter"] = []


_state = _GraphState()


def is_grad_enabled() -> bool:
    """Whether operations on this thread record a backward graph."""
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul and convolution kernels."""

    def __init__(self):
        self.total = 0
        self.by_op = {"matmul": 0, "depthwise_conv2d": 0}

    def add(self, op: str, macs: int) -> None:
        self.total += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed on this thread inside the block."""
    counter = MacCounter()
    _state.mac_counters.append(counter)
    try:
        yield counter
    finally:
        _state.mac_counters.remove(counter)


def _record_macs(op: str, macs: int) -> None:
    for counter in _state.mac_counters:
        counter.add(op, macs)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on the input arrays and ``backward``,
    which receives dL/d(output) and returns dL/d(input) for every input
    (``None`` for inputs that take no gradient).
    """

    def __init__(self, *tensors: "Tensor"):
        self.parents = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _state.grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _ctx=func if requires_grad else None)


class Tensor:
    """
    Dense n-dimensional float array with optional gradient tracking.

    ``data`` is a contiguous numpy array in 32-bit or 64-bit precision.
    ``grad`` (a Tensor of identical shape) is populated by ``backward`` on
    every tensor with ``requires_grad`` reachable from the loss.
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[Any] = None,
                 _ctx: Optional[Function] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=dtype)
        if array.dtype.type not in SUPPORTED_DTYPES:
            array = array.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._ctx = _ctx

    # *** properties ***
    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeMismatch(f"T is only defined for 2-D tensors, got shape {self.shape}")
        return self.transpose(1, 0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # *** data handling ***
    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype: Any) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _lift(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # *** arithmetic ***
    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Mul.apply(self, self._lift(-1.0))

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    # *** shape and reductions ***
    def sum(self, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=_normalize_axes(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise EmptyReduction(f"Cannot average over zero elements (shape {self.shape}, axes {axes})")
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    # *** elementwise ***
    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Pow.apply(self, exponent=0.5)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    # *** backward pass ***
    def backward(self) -> None:
        backward(self)


def _normalize_axes(axis: Optional[Union[int, Sequence[int]]], ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeMismatch(f"Axis {a} out of range for {ndim}-D tensor")
        axes.append(a % ndim)
    return tuple(sorted(set(axes)))


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# *** elementwise functions ***

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        self.out = np.power(a, exponent)
        return self.out

    def backward(self, grad):
        if self.exponent == 0.5:
            return (grad * 0.5 / self.out,)
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros((), dtype=a.dtype))

    def backward(self, grad):
        # subgradient at exactly 0 is 0
        return (grad * self.mask,)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """Tanh-form Gaussian error linear unit."""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)


# *** shape functions ***

class Sum(Function):
    def forward(self, a, axis: Tuple[int, ...], keepdims: bool):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape: Tuple[int, ...]):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise ShapeMismatch(f"Cannot reshape {a.shape} to {shape}") from e

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes: Tuple[int, ...]):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeMismatch(f"Invalid permutation {axes} for {a.ndim}-D tensor")
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul inner extents differ: {a.shape} x {b.shape}")
        self.a, self.b = a, b
        out = np.matmul(a, b)
        _record_macs("matmul", out.size * a.shape[-1])
        return out

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class SoftmaxLastDim(Function):
    def forward(self, a):
        shifted = a - np.max(a, axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=-1, keepdims=True)),)


class LogSoftmaxLastDim(Function):
    def forward(self, a):
        shifted = a - np.max(a, axis=-1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        self.out = shifted - log_norm
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * np.sum(grad, axis=-1, keepdims=True),)


class DepthwiseConv2d(Function):
    """Per-channel same-padded 2-D cross-correlation over the last three axes (C, H, W)."""

    def forward(self, x, kernel):
        if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
            raise InvalidKernel(f"Kernel must have shape (C, k, k), got {kernel.shape}")
        k = kernel.shape[1]
        if k % 2 == 0:
            raise InvalidKernel(f"Kernel size must be odd, got {k}")
        if x.ndim < 3 or x.shape[-3] != kernel.shape[0]:
            raise ShapeMismatch(f"Channel count of input {x.shape} does not match kernel {kernel.shape}")

        pad = k // 2
        height, width = x.shape[-2], x.shape[-1]
        pad_width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        xp = np.pad(x, pad_width)
        out = np.zeros_like(x)
        for u in range(k):
            for v in range(k):
                out += kernel[:, u, v][:, None, None] * xp[..., u:u + height, v:v + width]

        self.xp, self.kernel, self.pad = xp, kernel, pad
        self.hw = (height, width)
        _record_macs("depthwise_conv2d", x.size * k * k)
        return out

    def backward(self, grad):
        xp, kernel, pad = self.xp, self.kernel, self.pad
        height, width = self.hw
        k = kernel.shape[1]
        reduce_axes = tuple(range(grad.ndim - 3)) + (grad.ndim - 2, grad.ndim - 1)

        grad_xp = np.zeros_like(xp)
        grad_kernel = np.zeros_like(kernel)
        for u in range(k):
            for v in range(k):
                window = xp[..., u:u + height, v:v + width]
                grad_xp[..., u:u + height, v:v + width] += kernel[:, u, v][:, None, None] * grad
                grad_kernel[:, u, v] = np.sum(grad * window, axis=reduce_axes)
        grad_x = grad_xp[..., pad:pad + height, pad:pad + width]
        return grad_x, grad_kernel


# *** public operations ***

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    return MatMul.apply(_as_tensor(a), _as_tensor(b))


def reduce_moments(x: Tensor, axes: Union[int, Sequence[int]], keepdims: bool = False) -> Tuple[Tensor, Tensor]:
    """
    Population mean and variance of ``x`` over ``axes``.

    Args:
        x: Input tensor
        axes: Axis or axes to reduce
        keepdims: Keep reduced axes with extent 1

    Returns:
        Tuple of (mean, var); variance divides by the element count

    Raises:
        EmptyReduction: If the reduced element count is zero
    """
    x = _as_tensor(x)
    norm_axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in norm_axes])) if norm_axes else 1
    if x.size == 0 or count == 0:
        raise EmptyReduction(f"Cannot compute moments over zero elements (shape {x.shape})")
    mean = x.mean(axis=norm_axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=norm_axes, keepdims=keepdims)
    if not keepdims:
        mean = mean.reshape(var.shape)
    return mean, var


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    return Relu.apply(_as_tensor(x))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    return Gelu.apply(_as_tensor(x))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-max stabilized softmax over the last axis."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeMismatch(f"softmax needs a last extent >= 1, got shape {x.shape}")
    return SoftmaxLastDim.apply(x)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    return LogSoftmaxLastDim.apply(_as_tensor(x))


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """
    Depth-wise 2-D convolution with zero same-padding.

    Args:
        x: Input of shape (C, H, W) or (B, C, H, W)
        kernel: Per-channel kernels of shape (C, k, k) with k odd

    Returns:
        Tensor with the same shape as ``x``

    Raises:
        ShapeMismatch: If channel counts differ
        InvalidKernel: If k is even or the kernel is not square
    """
    return DepthwiseConv2d.apply(_as_tensor(x), _as_tensor(kernel))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively, both across multiple uses of a tensor
    inside one graph and across repeated backward calls.

    Raises:
        NotScalar: If ``loss`` has more than one element
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a tensor that does not require grad")
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = Tensor(grad.copy())
            else:
                node.grad = Tensor(node.grad.data + grad)
        if node._ctx is None:
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
