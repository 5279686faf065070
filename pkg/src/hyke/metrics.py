"""Image-quality metrics for reconstructed activity sequences: ROI MSE,
sequence PSNR, and windowed SSIM."""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

__all__ = ["mse_roi", "psnr", "ssim", "PSNR_INF"]

# reported when the reconstruction matches ground truth exactly
PSNR_INF = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_shapes(x, xhat):
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return x, xhat


def mse_roi(x, xhat, mask) -> float:
    """Mean squared error over masked pixels, across all frames."""
    x, xhat = _check_shapes(x, xhat)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match image "
                         f"{x.shape[-2:]}")
    if not mask.any():
        raise ValueError("ROI mask is empty")
    diff = (x[..., mask] - xhat[..., mask]) ** 2
    return float(diff.mean())


def psnr(x, xhat) -> float:
    """10*log10(peak^2 / MSE) with peak the ground-truth sequence maximum."""
    x, xhat = _check_shapes(x, xhat)
    peak = float(x.max())
    if peak <= 0 or np.allclose(x, x.flat[0]):
        raise ValueError("PSNR needs a non-constant, positive ground truth")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x, xhat, dynamic_range: float | None = None) -> float:
    """Mean local SSIM per frame, averaged over frames.

    Gaussian window 11x11 (sigma 1.5), K1=0.01, K2=0.03; the dynamic range
    defaults to the ground-truth sequence peak.
    """
    x, xhat = _check_shapes(x, xhat)
    if x.ndim == 2:
        x = x[None]
        xhat = xhat[None]
    if x.ndim != 3:
        raise ValueError("expects [T, H, W] or [H, W]")
    h, w = x.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x"
                         f"{SSIM_WINDOW} SSIM window")
    rng = float(x.max()) if dynamic_range is None else float(dynamic_range)
    if rng <= 0:
        raise ValueError("dynamic range must be positive")
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for a, b in zip(x, xhat):
        mu_a = fftconvolve(a, win, mode="valid")
        mu_b = fftconvolve(b, win, mode="valid")
        sa = fftconvolve(a * a, win, mode="valid") - mu_a ** 2
        sb = fftconvolve(b * b, win, mode="valid") - mu_b ** 2
        sab = fftconvolve(a * b, win, mode="valid") - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (sa + sb + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
