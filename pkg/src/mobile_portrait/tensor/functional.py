"""Differentiable primitives recorded on the gradient tape."""

from collections.abc import Sequence
from typing import Any

import numpy as np

from mobile_portrait.tensor import kernels
from mobile_portrait.tensor.core import Function, Tensor, as_tensor
from mobile_portrait.validation import DimensionError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============ Elementwise ============


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    name = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (
            _unbroadcast(grad / self.b, self.a.shape),
            _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Neg(Function):
    name = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (-grad,)


class Abs(Function):
    name = "abs"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.sign,)


class Exp(Function):
    name = "exp"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.out,)


class Log(Function):
    """Natural log with the argument floored at ``floor``."""

    name = "log"

    def forward(self, a: np.ndarray, floor: float = 1e-12) -> np.ndarray:
        self.clamped = np.maximum(a, floor)
        self.active = a > floor
        return np.log(self.clamped)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad / self.clamped * self.active,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a: np.ndarray, eps: float = 0.0) -> np.ndarray:
        self.out = np.sqrt(a + eps)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(self.out > 0, grad / (2.0 * self.out), 0.0)
        return (g.astype(np.float32),)


class ReLU(Function):
    name = "relu"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = (0.5 * (1.0 + np.tanh(0.5 * a))).astype(np.float32)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.out * (1.0 - self.out),)


class Clip(Function):
    name = "clip"

    def forward(self, a: np.ndarray, low: float, high: float) -> np.ndarray:
        self.pass_through = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.pass_through,)


# ============ Reductions and Layout ============


class Sum(Function):
    name = "sum"

    def forward(self, a: np.ndarray, axis: int | tuple[int, ...] | None, keepdims: bool) -> np.ndarray:
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims, dtype=np.float32))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).astype(np.float32),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.shape),)


class Permute(Function):
    name = "permute"

    def forward(self, a: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.asarray(a.transpose(axes), order="C")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.transpose(self.inverse),)


class Index(Function):
    name = "index"

    def forward(self, a: np.ndarray, key: Any) -> np.ndarray:
        self.shape = a.shape
        self.key = key
        return np.asarray(a[key], order="C")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        full = np.zeros(self.shape, dtype=np.float32)
        np.add.at(full, self.key, grad)
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MatMul(Function):
    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        da = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        db = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(da, self.a.shape), _unbroadcast(db, self.b.shape)


# ============ Image Primitives ============


class Conv2d(Function):
    name = "conv2d"

    def forward(
        self, x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int
    ) -> np.ndarray:
        out, self.cols = kernels.conv2d_forward(x, w, b, stride, padding)
        self.x_shape, self.w = x.shape, w
        self.stride, self.padding = stride, padding
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return kernels.conv2d_backward(grad, self.cols, self.x_shape, self.w, self.stride, self.padding)


class GridSample(Function):
    name = "grid_sample"

    def forward(self, image: np.ndarray, grid: np.ndarray) -> np.ndarray:
        out, self.idx = kernels.grid_sample_forward(image, grid)
        self.image = image
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        dimage = kernels.grid_sample_backward_image(grad, self.idx, self.image.shape)
        dgrid = kernels.grid_sample_backward_grid(grad, self.image, self.idx)
        return dimage, dgrid


class Resize(Function):
    name = "resize"

    def forward(self, image: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
        if image.ndim != 4:
            raise DimensionError("resize input must be rank 4", axis="rank", expected=4, actual=image.ndim)
        self.ry = kernels.resize_matrix(image.shape[2], out_h, mode)
        self.rx = kernels.resize_matrix(image.shape[3], out_w, mode)
        return kernels.resize_forward(image, self.ry, self.rx)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (kernels.resize_backward(grad, self.ry, self.rx),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.out = kernels.softmax(x, axis)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


# ============ Public API ============


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return Abs.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    return Log.apply(a, floor=floor)


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    return Sqrt.apply(a, eps=eps)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(a, axes=tuple(axes))


def index(a: Tensor, key: Any) -> Tensor:
    return Index.apply(a, key=key)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer, ``x @ weight.T + bias`` with weight (out, in)."""
    return MatMul.apply(x, permute(weight, (1, 0))) + bias


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution with zero padding (cross-correlation, like every DL framework)."""
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def grid_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Bilinear backward warp of ``image`` at normalized ``grid`` positions, border-clamped."""
    return GridSample.apply(image, grid)


def resize(image: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    return Resize.apply(image, out_h=out_h, out_w=out_w, mode=mode)


def softmax(x: Tensor, axis: int) -> Tensor:
    return Softmax.apply(x, axis=axis)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of a (B, C, H, W) tensor."""
    if x.ndim != 4:
        raise DimensionError("softmax_channels input must be rank 4", axis="rank", expected=4, actual=x.ndim)
    return Softmax.apply(x, axis=1)
