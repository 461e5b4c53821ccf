"""Reference-quality evaluation metrics: PSNR, SSIM, router accuracy.

PSNR is computed over all channels jointly; SSIM on the luminance channel
(fixed RGB weights 0.299 / 0.587 / 0.114) with an 11x11 Gaussian window,
sigma 1.5, and the usual stabilizers C1 = (0.01 * peak)^2, C2 = (0.03 * peak)^2.
Identical images report an infinite PSNR (a true float infinity, never a
finite cap). Everything runs in double precision.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["mse", "psnr", "ssim", "router_accuracy", "luminance"]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def mse(x, y) -> float:
    x, y = _as64(x), _as64(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(x, y, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE), in dB; ``inf`` for identical images."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def luminance(rgb) -> np.ndarray:
    rgb = _as64(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) RGB, got {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[0] + g * rgb[1] + b * rgb[2]


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("hwij,ij->hw", view, win)


def ssim(x, y, peak: float = 1.0) -> float:
    """Mean local structural similarity over valid window positions.

    Accepts (3, H, W) RGB (reduced to luminance) or (H, W) grayscale.
    """
    x, y = _as64(x), _as64(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = luminance(x), luminance(y)
    elif x.ndim != 2:
        raise ValueError(f"expected RGB or grayscale image, got shape {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = _windowed_mean(x, win)
    mu_y = _windowed_mean(y, win)
    xx = _windowed_mean(x * x, win) - mu_x * mu_x
    yy = _windowed_mean(y * y, win) - mu_y * mu_y
    xy = _windowed_mean(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def router_accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predictions.size == 0:
        raise ValueError("router_accuracy of empty inputs")
    if predictions.shape != truth.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truth.shape}")
    return float(np.mean(predictions == truth))
