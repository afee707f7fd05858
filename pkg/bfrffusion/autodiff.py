"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a Function subclass. Calling Function.apply
runs the numpy forward pass and, when gradients are enabled and any input
requires them, attaches the Function instance to the output as its graph
record. backward() walks those records in reverse topological order.

Layout is row-major NCHW throughout. Parameters default to float32; wrap a
block in use_dtype(np.float64) for finite-difference checks.
"""

import contextlib
import contextvars
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

# tanh approximation constant of GELU
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

ACTIVATIONS = ("silu", "gelu")
EWISE_KINDS = ("add", "sub", "mul", "div")

_default_dtype: contextvars.ContextVar = contextvars.ContextVar("bfr_default_dtype", default=np.float32)
_grad_enabled: contextvars.ContextVar = contextvars.ContextVar("bfr_grad_enabled", default=True)


def default_dtype() -> np.dtype:
    """dtype used for new tensors and parameters in the current context"""
    return np.dtype(_default_dtype.get())


@contextlib.contextmanager
def use_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (float32 or float64)"""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"Unsupported tensor dtype: {dtype}")
    token = _default_dtype.set(dtype.type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """
    N-D float array with optional gradient and graph linkage.

    `node` is the Function that produced this tensor (None for leaves).
    Only leaves with requires_grad=True ever accumulate `grad`.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        target = np.dtype(dtype) if dtype is not None else default_dtype()
        self.data: np.ndarray = np.array(data, dtype=target)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional["Function"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.node = None
        return tensor

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

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"Gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    # Convenience operators -------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return ewise(self, other, "add")
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return ewise(self, other, "sub")
        return shift(self, -float(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return ewise(self, other, "mul")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return ewise(self, other, "div")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


ArrayOrTensor = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: ArrayOrTensor, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A recorded operation: op kind, inputs and saved activations"""

    kind = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad)
        if requires_grad:
            result.node = fn
        return result


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


class Elementwise(Function):
    kind = "ewise"

    def forward(self, a, b, op):
        if op not in EWISE_KINDS:
            raise ConfigurationError(f"Unknown elementwise op '{op}', expected one of {EWISE_KINDS}")
        try:
            target = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            target = None
        if target != a.shape:
            raise DimensionError(f"Cannot broadcast shape {b.shape} into {a.shape}")
        self.op = op
        self.a, self.b = a, b
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        return a / b

    def backward(self, grad):
        a, b = self.a, self.b
        if self.op == "add":
            ga, gb = grad, grad
        elif self.op == "sub":
            ga, gb = grad, -grad
        elif self.op == "mul":
            ga, gb = grad * b, grad * a
        else:
            ga, gb = grad / b, -grad * a / (b * b)
        return np.broadcast_to(ga, a.shape), unbroadcast(gb, b.shape)


class Scale(Function):
    kind = "scale"

    def forward(self, x, factor):
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Shift(Function):
    kind = "shift"

    def forward(self, x, offset):
        return x + x.dtype.type(offset)

    def backward(self, grad):
        return (grad,)


def ewise(a: Tensor, b: ArrayOrTensor, kind: str) -> Tensor:
    """Elementwise a (op) b with b broadcast into a's shape"""
    return Elementwise.apply(a, as_tensor(b, dtype=a.dtype), op=kind)


def add(a: Tensor, b: ArrayOrTensor) -> Tensor:
    return ewise(a, b, "add")


def mul(a: Tensor, b: ArrayOrTensor) -> Tensor:
    return ewise(a, b, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def shift(x: Tensor, offset: float) -> Tensor:
    return Shift.apply(x, offset=offset)


# ---------------------------------------------------------------------------
# Linear algebra and normalisation
# ---------------------------------------------------------------------------


class MatMul(Function):
    kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias); weight is [in, out]"""
    y = matmul(x, weight)
    return ewise(y, bias, "add") if bias is not None else y


class LayerNorm(Function):
    """Normalise to zero mean / unit variance along one axis, no affine"""

    kind = "layer_norm"

    def forward(self, x, eps, axis):
        if eps <= 0:
            raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f"layer_norm axis {axis} invalid for shape {x.shape}")
        centered = x - x.mean(axis=axis, keepdims=True)
        var = (centered * centered).mean(axis=axis, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.axis = axis
        self.inv_std = inv_std
        self.xhat = centered * inv_std
        return self.xhat

    def backward(self, grad):
        axis, xhat = self.axis, self.xhat
        mean_grad = grad.mean(axis=axis, keepdims=True)
        mean_proj = (grad * xhat).mean(axis=axis, keepdims=True)
        return (self.inv_std * (grad - mean_grad - xhat * mean_proj),)


def layer_norm(x: Tensor, eps: float = 1e-5, axis: int = 1) -> Tensor:
    return LayerNorm.apply(x, eps=eps, axis=axis)


class Softmax(Function):
    kind = "softmax"

    def forward(self, x, axis):
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.axis = axis
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class Activation(Function):
    kind = "activation"

    def forward(self, x, name):
        self.name = name
        self.x = x
        if name == "silu":
            self.sig = expit(x)
            return x * self.sig
        if name == "gelu":
            c = x.dtype.type(_SQRT_2_OVER_PI)
            self.tanh = np.tanh(c * (x + x.dtype.type(GELU_COEFF) * x ** 3))
            return 0.5 * x * (1.0 + self.tanh)
        raise ConfigurationError(f"Unknown activation '{name}', expected one of {ACTIVATIONS}")

    def backward(self, grad):
        x = self.x
        if self.name == "silu":
            s = self.sig
            return (grad * (s * (1.0 + x * (1.0 - s))),)
        t = self.tanh
        c = x.dtype.type(_SQRT_2_OVER_PI)
        dinner = c * (1.0 + 3.0 * x.dtype.type(GELU_COEFF) * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


def activation(x: Tensor, kind: str) -> Tensor:
    return Activation.apply(x, name=kind)


def silu(x: Tensor) -> Tensor:
    return activation(x, "silu")


def gelu(x: Tensor) -> Tensor:
    return activation(x, "gelu")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


class Conv2d(Function):
    """Grouped 2-D cross-correlation over NCHW input via strided windows"""

    kind = "conv2d"

    def forward(self, x, w, b=None, *, stride, padding, groups):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
        _, c_in, height, width = x.shape
        c_out, c_per_group, kh, kw = w.shape
        if groups < 1 or c_in % groups or c_out % groups:
            raise ConfigurationError(f"groups={groups} must divide in ({c_in}) and out ({c_out}) channels")
        if c_per_group != c_in // groups:
            raise DimensionError(f"Weight expects {c_per_group} channels per group, input provides {c_in // groups}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
        if stride < 1 or padding < 0:
            raise ConfigurationError(f"Invalid stride {stride} / padding {padding}")
        if b is not None and b.shape != (c_out,):
            raise DimensionError(f"Bias shape {b.shape} does not match {c_out} output channels")
        if height + 2 * padding < kh or width + 2 * padding < kw:
            raise DimensionError(f"Kernel {kh}x{kw} larger than padded input {x.shape}")

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        n, _, h_out, w_out = windows.shape[:4]

        self.xp, self.w = xp, w
        self.stride, self.padding, self.groups = stride, padding, groups
        self.in_shape = x.shape
        self.has_bias = b is not None

        co_group = c_out // groups
        if c_per_group == 1 and co_group == 1:
            out = np.einsum("nchwij,cij->nchw", windows, w[:, 0])
        else:
            out = np.empty((n, c_out, h_out, w_out), dtype=np.result_type(x, w))
            for g in range(groups):
                win = windows[:, g * c_per_group:(g + 1) * c_per_group]
                wg = w[g * co_group:(g + 1) * co_group]
                out[:, g * co_group:(g + 1) * co_group] = np.tensordot(
                    win, wg, axes=([1, 4, 5], [1, 2, 3])
                ).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b[None, :, None, None]
        return out

    def backward(self, grad):
        xp, w, s = self.xp, self.w, self.stride
        c_out, c_per_group, kh, kw = w.shape
        co_group = c_out // self.groups
        h_out, w_out = grad.shape[2], grad.shape[3]
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]

        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        if c_per_group == 1 and co_group == 1:
            gw[:, 0] = np.einsum("nchw,nchwij->cij", grad, windows)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += grad * w[:, 0, i, j][None, :, None, None]
        else:
            for g in range(self.groups):
                cin = slice(g * c_per_group, (g + 1) * c_per_group)
                cout = slice(g * co_group, (g + 1) * co_group)
                gg = grad[:, cout]
                gw[cout] = np.tensordot(gg, windows[:, cin], axes=([0, 2, 3], [0, 2, 3]))
                cols = np.tensordot(gg, w[cout], axes=([1], [0]))  # [N, H', W', C/g, kh, kw]
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, cin, i:i + s * h_out:s, j:j + s * w_out:s] += cols[..., i, j].transpose(0, 3, 1, 2)

        p = self.padding
        _, _, height, width = self.in_shape
        gx = gxp[:, :, p:p + height, p:p + width] if p else gxp
        grads = [gx, gw]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding, groups=groups)


# ---------------------------------------------------------------------------
# Shape plumbing and reductions
# ---------------------------------------------------------------------------


class Reshape(Function):
    kind = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"Cannot reshape {x.shape} into {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    kind = "permute"

    def forward(self, x, axes):
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Sum(Function):
    kind = "sum"

    def forward(self, x, axis, keepdims):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape),)


class Mean(Function):
    kind = "mean"

    def forward(self, x, axis, keepdims):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / grad.dtype.type(self.count), self.in_shape),)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"Cannot concatenate: {exc}") from None

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(grad, bounds, axis=self.axis)


class SliceAxis(Function):
    kind = "slice"

    def forward(self, x, axis, start, stop):
        self.in_shape = x.shape
        self.index = tuple(slice(start, stop) if d == axis % x.ndim else slice(None) for d in range(x.ndim))
        return x[self.index]

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        full[self.index] = grad
        return (full,)


class UpsampleNearest(Function):
    kind = "upsample_nearest"

    def forward(self, x, factor):
        self.factor = factor
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        f = self.factor
        return (grad.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


def split(x: Tensor, parts: int, axis: int = 1) -> List[Tensor]:
    extent = x.shape[axis]
    if extent % parts:
        raise DimensionError(f"Axis {axis} of extent {extent} does not split into {parts} parts")
    step = extent // parts
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(parts)]


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return UpsampleNearest.apply(x, factor=factor)


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """[N,C,H,W] -> [N,C*f*f,H/f,W/f]; channel index is c*f*f + i*f + j"""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"Spatial size {h}x{w} not divisible by factor {factor}")
    y = reshape(x, (n, c, h // factor, factor, w // factor, factor))
    y = permute(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, c * factor * factor, h // factor, w // factor))


def depth_to_space(z: Tensor, factor: int) -> Tensor:
    """Exact inverse of space_to_depth"""
    n, c, h, w = z.shape
    if c % (factor * factor):
        raise ConfigurationError(f"{c} channels not divisible by factor^2 = {factor * factor}")
    out_c = c // (factor * factor)
    y = reshape(z, (n, out_c, factor, factor, h, w))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, out_c, h * factor, w * factor))


def mse(prediction: Tensor, target: ArrayOrTensor) -> Tensor:
    """Mean over all elements of (prediction - target)^2"""
    target = as_tensor(target, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise DimensionError(f"Prediction shape {prediction.shape} differs from target shape {target.shape}")
    diff = ewise(prediction, target, "sub")
    return tensor_mean(ewise(diff, diff, "mul"))


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for inp in tensor.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss"""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if not loss.requires_grad:
            raise UsageError("Loss is not connected to a recorded graph")
        loss._accumulate(seed)
        return

    grads: Dict[int, np.ndarray] = {id(loss): seed}
    for tensor in reversed(_topological_order(loss)):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor._accumulate(grad)
            continue
        for inp, inp_grad in zip(tensor.node.inputs, tensor.node.backward(grad)):
            if inp_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = inp_grad if key not in grads else grads[key] + inp_grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare backward() gradients with central differences.

    Returns the worst per-element error |a - n| / max(|a|, |n|, 1e-4).
    With max_checks set, at most that many coordinates per input are checked,
    chosen deterministically from `seed`.
    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise UsageError(f"grad_check needs float64 inputs, got {tensor.dtype}")
        tensor.zero_grad()

    backward(f(*inputs))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            indices = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in indices:
                original = flat[i]
                flat[i] = original + h
                f_plus = f(*inputs).item()
                flat[i] = original - h
                f_minus = f(*inputs).item()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = abs(grad_flat[i] - numeric) / max(abs(grad_flat[i]), abs(numeric), 1e-4)
                worst = max(worst, float(err))
    logger.debug(f"grad_check over {len(inputs)} inputs: worst relative error {worst:.3e}")
    return worst
