"""Image quality metrics: PSNR and SSIM.

Both expect tensors in [0, max_val]. SSIM uses the standard 11-tap
Gaussian window (sigma 1.5), valid-mode filtering (no padding), constants
K1=0.01 / K2=0.03, computed per channel and averaged.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor


def psnr(a: Tensor, b: Tensor, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering over the last two axes."""
    k = w.size
    h, wd = x.shape[-2], x.shape[-1]
    out = np.zeros(x.shape[:-2] + (h - k + 1, wd), dtype=x.dtype)
    for i in range(k):
        out += w[i] * x[..., i : i + h - k + 1, :]
    out2 = np.zeros(x.shape[:-2] + (h - k + 1, wd - k + 1), dtype=x.dtype)
    for i in range(k):
        out2 += w[i] * out[..., :, i : i + wd - k + 1]
    return out2


def ssim(a: Tensor, b: Tensor, max_val: float = 1.0) -> float:
    """Mean structural similarity over batch and channels."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.shape[2] < 11 or a.shape[3] < 11:
        raise ShapeError(f"ssim needs spatial sizes >= 11, got {a.shape}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    w = _gaussian_window()
    mu_x = _filter_valid(x, w)
    mu_y = _filter_valid(y, w)
    s_xx = _filter_valid(x * x, w) - mu_x * mu_x
    s_yy = _filter_valid(y * y, w) - mu_y * mu_y
    s_xy = _filter_valid(x * y, w) - mu_x * mu_y
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * s_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (s_xx + s_yy + c2)
    return float(np.mean(num / den))
