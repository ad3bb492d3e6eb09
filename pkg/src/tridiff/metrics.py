"""Reconstruction quality metrics.

Signals live in [-1, 1], so the default PSNR peak is the range width 2;
the peak used is recorded in every report. SSIM uses a uniform (not
Gaussian) window, which suits the small images this package works with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as ss

from .validation import ShapeError

__all__ = ["MetricReport", "psnr", "ssim", "residual_norm", "PSNR_CAP_DB"]

PSNR_CAP_DB = 200.0


@dataclass
class MetricReport:
    psnr: float
    mse: float
    residual_norm: float
    runtime_seconds: float
    ssim: float | None = None
    peak: float = 2.0
    ssim_window: int = 7


def psnr(x, ref, peak: float = 2.0) -> float:
    """10 log10(peak^2 / mse), capped at 200 dB for exact matches."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def ssim(x, ref, window: int = 7, peak: float = 2.0) -> float:
    """Mean local structural similarity over a sliding uniform window."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim != 2:
        raise ShapeError(f"ssim: need 2D images, got shape {x.shape}")
    if window % 2 == 0 or window < 1:
        raise ValueError(f"ssim: window must be odd and positive, got {window}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"ssim: image {x.shape} smaller than window {window}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    kernel = np.full((window, window), 1.0 / (window * window))

    def win_mean(img):
        return ss.correlate2d(img, kernel, mode="valid")

    mu_x = win_mean(x)
    mu_y = win_mean(ref)
    var_x = win_mean(x * x) - mu_x * mu_x
    var_y = win_mean(ref * ref) - mu_y * mu_y
    cov = win_mean(x * ref) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())


def residual_norm(problem, x) -> float:
    """L2 norm of the measurement residual A(x) - y."""
    return float(np.linalg.norm(problem.operator.apply(np.asarray(x, dtype=np.float64)) - problem.y))
