"""Reference-based image quality metrics."""

import numpy as np

from mobile_portrait.tensor import Tensor
from mobile_portrait.validation import check_same_shape

PSNR_CAP_DB = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at 99 dB."""
    check_same_shape(a.shape, b.shape, "psnr inputs")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(image: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(image, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean structural similarity over valid Gaussian windows, averaged across channels.

    The window is 11x11 with sigma 1.5, shrunk to the largest odd size that
    fits images smaller than that.
    """
    check_same_shape(a.shape, b.shape, "ssim inputs")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    size = min(SSIM_WINDOW, x.shape[-2], x.shape[-1])
    if size % 2 == 0:
        size -= 1
    g = gaussian_window(size)
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x**2
    var_y = _filter_valid(y * y, g) - mu_y**2
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))
