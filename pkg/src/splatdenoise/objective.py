"""Training loss (L1 + D-SSIM) with its exact image gradient, plus PSNR/SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _window() -> np.ndarray:
    x = np.arange(WINDOW) - WINDOW // 2
    g = np.exp(-(x**2) / (2 * SIGMA**2))
    return g / g.sum()


_G = _window()


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _filter(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, 'valid' region only, over axes 0 and 1."""
    x = np.tensordot(sliding_window_view(x, WINDOW, axis=0), _G, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(x, WINDOW, axis=1), _G, axes=([-1], [0]))


def _filter_adjoint(y: np.ndarray) -> np.ndarray:
    # the window is symmetric, so the adjoint is the same filter on a zero-padded map
    pad = WINDOW - 1
    return _filter(np.pad(y, ((pad, pad), (pad, pad), (0, 0))))


def _check_pair(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _ssim_terms(x, y):
    if min(x.shape[0], x.shape[1]) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    mu_x, mu_y = _filter(x), _filter(y)
    sxx = _filter(x * x) - mu_x**2
    syy = _filter(y * y) - mu_y**2
    sxy = _filter(x * y) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + C1
    a2 = 2 * sxy + C2
    b1 = mu_x**2 + mu_y**2 + C1
    b2 = sxx + syy + C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    x, y = _check_pair(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(x, y) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to the first image."""
    x, y = _check_pair(x, y)
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    den = b1 * b2
    s = a1 * a2 / den
    scale = 1.0 / s.size
    d_mu = (2 * mu_y * (a2 - a1) / den - s * (2 * mu_x / b1 - 2 * mu_x / b2)) * scale
    d_xx = -s / b2 * scale
    d_xy = 2 * a1 / den * scale
    grad = _filter_adjoint(d_mu) + 2 * x * _filter_adjoint(d_xx) + y * _filter_adjoint(d_xy)
    return float(np.mean(s)), grad


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    d_total_d_rgb: np.ndarray


def compute_loss(rendered, target, lambda_ssim: float = 0.2) -> LossReport:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`` and its gradient."""
    x, y = _check_pair(rendered, target)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim != 0.0:
        s, ds = ssim_with_grad(x, y)
        grad = grad - 0.5 * lambda_ssim * ds
    else:
        s = ssim(x, y) if min(x.shape[:2]) >= WINDOW else 1.0
    dssim = (1.0 - s) / 2.0
    total = (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim
    grad = grad.reshape(np.shape(rendered))
    return LossReport(total, l1, dssim, grad)


def l2_loss(rendered, target) -> tuple[float, np.ndarray]:
    """Sum of squared errors and its gradient; used for Fisher information."""
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sum(diff * diff)), 2.0 * diff
