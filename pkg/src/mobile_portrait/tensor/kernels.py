"""Raw numpy kernels behind the differentiable primitives.

Convolution uses im2col + matmul; grid sampling and resizing are bilinear
gathers with explicit scatter-add adjoints. All arrays are float32 and laid
out batch x channels x height x width.
"""

import numpy as np

from mobile_portrait.validation import DimensionError, check_axis, check_rank

# Sampling positions this close to a pixel centre snap onto it, so identity
# grids reproduce the image bit for bit.
SNAP_TOLERANCE_PX = 1e-4


# ============ Convolution ============


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a convolution along one axis."""
    return (size + 2 * padding - kernel) // stride + 1


def check_conv_shapes(
    x_shape: tuple[int, ...], w_shape: tuple[int, ...], bias_shape: tuple[int, ...] | None,
    stride: int, padding: int,
) -> tuple[int, int]:
    """Validate conv2d operands and return the output (height, width)."""
    check_rank(x_shape, 4, "conv2d input")
    check_rank(w_shape, 4, "conv2d kernel")
    check_axis(w_shape[1], x_shape[1], "channels", "conv2d kernel input channels")
    if bias_shape is not None:
        check_axis(bias_shape[0] if bias_shape else 0, w_shape[0], "out_channels", "conv2d bias")
    if stride < 1:
        raise DimensionError("stride must be positive", axis="stride", expected=">= 1", actual=stride)
    if padding < 0:
        raise DimensionError("padding must be non-negative", axis="padding", expected=">= 0", actual=padding)
    _, _, H, W = x_shape
    _, _, kh, kw = w_shape
    if H + 2 * padding < kh:
        raise DimensionError("kernel taller than padded input", axis="height", expected=f">= {kh}", actual=H + 2 * padding)
    if W + 2 * padding < kw:
        raise DimensionError("kernel wider than padded input", axis="width", expected=f">= {kw}", actual=W + 2 * padding)
    return conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)


def pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of an already padded input as (B, C*kh*kw, out_h*out_w)."""
    B, C = x.shape[:2]
    sB, sC, sH, sW = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, kh, kw, out_h, out_w),
        strides=(sB, sC, sH, sW, stride * sH, stride * sW),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(B, C * kh * kw, out_h * out_w)


def col2im(
    cols: np.ndarray, padded_shape: tuple[int, int, int, int], kh: int, kw: int,
    stride: int, out_h: int, out_w: int,
) -> np.ndarray:
    """Scatter-add columns back onto a padded input (adjoint of im2col)."""
    B, C, Hp, Wp = padded_shape
    x = np.zeros(padded_shape, dtype=np.float32)
    cols = cols.reshape(B, C, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return x


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Convolution output and the im2col columns kept for the backward pass."""
    out_h, out_w = check_conv_shapes(x.shape, w.shape, None if b is None else b.shape, stride, padding)
    cout, cin, kh, kw = w.shape
    cols = im2col(pad(x, padding), kh, kw, stride, out_h, out_w)
    out = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    out = out.reshape(x.shape[0], cout, out_h, out_w)
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out.astype(np.float32, copy=False), cols


def conv2d_backward(
    grad: np.ndarray, cols: np.ndarray, x_shape: tuple[int, ...], w: np.ndarray,
    stride: int, padding: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a convolution for (input, kernel, bias)."""
    B, C, H, W = x_shape
    cout, cin, kh, kw = w.shape
    out_h, out_w = grad.shape[2:]
    g = grad.reshape(B, cout, out_h * out_w)
    dw = np.einsum("bon,bkn->ok", g, cols, optimize=True).reshape(w.shape)
    dcols = np.matmul(w.reshape(cout, -1).T, g)
    padded = (B, C, H + 2 * padding, W + 2 * padding)
    dx = col2im(dcols, padded, kh, kw, stride, out_h, out_w)
    if padding:
        dx = dx[:, :, padding:padding + H, padding:padding + W]
    db = grad.sum(axis=(0, 2, 3))
    return dx.astype(np.float32), dw.astype(np.float32), db.astype(np.float32)


# ============ Grid Sampling ============


def identity_grid(height: int, width: int) -> np.ndarray:
    """Normalized sampling grid (1, H, W, 2) with x in channel 0.

    -1 is the centre of the first pixel and +1 the centre of the last one.
    """
    xs = np.linspace(-1.0, 1.0, width, dtype=np.float32) if width > 1 else np.full(1, -1.0, np.float32)
    ys = np.linspace(-1.0, 1.0, height, dtype=np.float32) if height > 1 else np.full(1, -1.0, np.float32)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)[None].astype(np.float32)


def _to_pixels(coord: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamped pixel positions and a mask of coordinates inside the range."""
    scale = 0.5 * (size - 1)
    pos = (coord.astype(np.float64) + 1.0) * scale
    inside = (pos >= 0.0) & (pos <= size - 1)
    pos = np.clip(pos, 0.0, size - 1)
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < SNAP_TOLERANCE_PX, nearest, pos)
    return pos, inside


class SampleIndex:
    """Corner indices and weights for one bilinear gather."""

    def __init__(self, grid: np.ndarray, height: int, width: int):
        px, self.inside_x = _to_pixels(grid[..., 0], width)
        py, self.inside_y = _to_pixels(grid[..., 1], height)
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        self.x0 = np.minimum(x0, width - 1)
        self.y0 = np.minimum(y0, height - 1)
        self.x1 = np.minimum(self.x0 + 1, width - 1)
        self.y1 = np.minimum(self.y0 + 1, height - 1)
        self.wx = (px - self.x0).astype(np.float32)
        self.wy = (py - self.y0).astype(np.float32)
        self.height = height
        self.width = width


def _gather(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """image[b, :, ys[b], xs[b]] as (B, C, H', W')."""
    B = image.shape[0]
    batch = np.arange(B)[:, None, None]
    return np.moveaxis(image[batch, :, ys, xs], -1, 1)


def grid_sample_forward(image: np.ndarray, grid: np.ndarray) -> tuple[np.ndarray, SampleIndex]:
    """Bilinear backward warp with border clamping."""
    check_rank(image.shape, 4, "grid_sample image")
    check_rank(grid.shape, 4, "grid_sample grid")
    check_axis(grid.shape[0], image.shape[0], "batch", "grid_sample grid")
    check_axis(grid.shape[3], 2, "coordinates", "grid_sample grid")
    idx = SampleIndex(grid, image.shape[2], image.shape[3])
    wx = idx.wx[:, None]
    wy = idx.wy[:, None]
    v00 = _gather(image, idx.y0, idx.x0)
    v01 = _gather(image, idx.y0, idx.x1)
    v10 = _gather(image, idx.y1, idx.x0)
    v11 = _gather(image, idx.y1, idx.x1)
    out = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) + v10 * (1 - wx) * wy + v11 * wx * wy
    return out.astype(np.float32), idx


def grid_sample_backward_image(grad: np.ndarray, idx: SampleIndex, image_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of the bilinear gather with respect to the image."""
    B, C = image_shape[:2]
    dimage = np.zeros(image_shape, dtype=np.float32)
    wx = idx.wx[:, None]
    wy = idx.wy[:, None]
    batch = np.broadcast_to(np.arange(B)[:, None, None], idx.x0.shape)
    for ys, xs, weight in (
        (idx.y0, idx.x0, (1 - wx) * (1 - wy)),
        (idx.y0, idx.x1, wx * (1 - wy)),
        (idx.y1, idx.x0, (1 - wx) * wy),
        (idx.y1, idx.x1, wx * wy),
    ):
        contrib = np.moveaxis(grad * weight, 1, -1)  # (B, H', W', C)
        np.add.at(dimage, (batch, slice(None), ys, xs), contrib)
    return dimage


def grid_sample_backward_grid(grad: np.ndarray, image: np.ndarray, idx: SampleIndex) -> np.ndarray:
    """Adjoint with respect to the sampling grid; zero where coordinates were clamped."""
    wx = idx.wx[:, None]
    wy = idx.wy[:, None]
    v00 = _gather(image, idx.y0, idx.x0)
    v01 = _gather(image, idx.y0, idx.x1)
    v10 = _gather(image, idx.y1, idx.x0)
    v11 = _gather(image, idx.y1, idx.x1)
    d_px = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * grad
    d_py = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * grad
    gx = d_px.sum(axis=1) * (0.5 * (idx.width - 1)) * idx.inside_x
    gy = d_py.sum(axis=1) * (0.5 * (idx.height - 1)) * idx.inside_y
    return np.stack([gx, gy], axis=-1).astype(np.float32)


# ============ Resizing ============


def resize_matrix(in_size: int, out_size: int, mode: str) -> np.ndarray:
    """(out_size, in_size) interpolation matrix along one axis.

    Nearest maps target centres with the align-corners-false rule
    ``floor((j + 0.5) * in / out)``. Bilinear places target pixel centres
    uniformly inside the span between the first and last source centres,
    ``(j + 0.5) * (in - 1) / out``.
    """
    if out_size < 1:
        raise DimensionError("resize target must be >= 1", axis="size", expected=">= 1", actual=out_size)
    m = np.zeros((out_size, in_size), dtype=np.float32)
    j = np.arange(out_size, dtype=np.float64)
    if mode == "nearest":
        src = np.minimum(np.floor((j + 0.5) * in_size / out_size).astype(np.int64), in_size - 1)
        m[np.arange(out_size), src] = 1.0
    elif mode == "bilinear":
        pos = (j + 0.5) * (in_size - 1) / out_size
        lo = np.minimum(np.floor(pos).astype(np.int64), in_size - 1)
        hi = np.minimum(lo + 1, in_size - 1)
        frac = pos - lo
        np.add.at(m, (np.arange(out_size), lo), (1.0 - frac).astype(np.float32))
        np.add.at(m, (np.arange(out_size), hi), frac.astype(np.float32))
    else:
        raise DimensionError(f"unknown resize mode '{mode}'", axis="mode", expected="nearest|bilinear", actual=mode)
    return m


def resize_forward(image: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    return np.einsum("ih,bchw,jw->bcij", ry, image, rx, optimize=True).astype(np.float32)


def resize_backward(grad: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    return np.einsum("ih,bcij,jw->bchw", ry, grad, rx, optimize=True).astype(np.float32)


# ============ Softmax ============


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    """Numerically stable softmax (max subtraction)."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
