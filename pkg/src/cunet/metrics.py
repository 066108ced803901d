"""Image quality metrics on [0, 1]-normalized images."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    """Root mean square error on the 0-255 scale."""
    a, b = _check(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)) * 255.0)


def psnr(a, b) -> float:
    """PSNR in dB for unit peak, capped at 99 dB."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted sum over every fully-contained window; img is (H, W, C)
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), mean over valid positions and channels."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ContractError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))
