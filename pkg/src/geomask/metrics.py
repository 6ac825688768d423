"""Pixel metrics in physical units: MAE, RMSE, SSIM, PSNR, IoU."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np
from scipy import signal

from .errors import InvalidArgumentError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, ref):
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if p.shape != r.shape:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {r.shape}")
    return p, r


def _abs_diff(pred, ref):
    p, r = _pair(pred, ref)
    d = np.abs(p - r)
    scale = float(d.max()) if d.size else 0.0
    return d, scale


def mae(pred, ref) -> float:
    d, scale = _abs_diff(pred, ref)
    if scale == 0.0 or not np.isfinite(scale):
        return float(np.mean(d)) if d.size else 0.0
    # rescale so differences near the subnormal limit do not round to zero
    return scale * float(np.mean(d / scale))


def mse(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean((p - r) ** 2))


def rmse(pred, ref) -> float:
    d, scale = _abs_diff(pred, ref)
    if scale == 0.0 or not np.isfinite(scale):
        return float(np.sqrt(np.mean(d**2))) if d.size else 0.0
    return scale * float(np.sqrt(np.mean((d / scale) ** 2)))


def psnr(pred, ref, data_range: float) -> float:
    """10 log10(range^2 / MSE) in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise InvalidArgumentError("data_range must be positive")
    err = mse(pred, ref)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_2d(x: np.ndarray, y: np.ndarray, data_range: float, window: np.ndarray) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(a):
        return signal.convolve2d(a, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, ref, data_range: float) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Accepts (H, W), (C, H, W) or (N, C, H, W); the statistic is computed per
    2-D plane over the valid window positions and then averaged.
    """
    p, r = _pair(pred, ref)
    if data_range <= 0:
        raise InvalidArgumentError("data_range must be positive")
    if p.ndim < 2 or p.shape[-1] < SSIM_WINDOW or p.shape[-2] < SSIM_WINDOW:
        raise InvalidArgumentError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    window = gaussian_window()
    planes_p = p.reshape(-1, *p.shape[-2:])
    planes_r = r.reshape(-1, *r.shape[-2:])
    return float(np.mean([_ssim_2d(a, b, data_range, window) for a, b in zip(planes_p, planes_r)]))


def metric_report(pred, ref, data_range: float) -> Dict[str, float]:
    """MAE, RMSE, SSIM, PSNR for a batch (N, C, H, W); SSIM/PSNR averaged per image."""
    p, r = _pair(pred, ref)
    if p.ndim == 3:
        p, r = p[None], r[None]
    psnrs = [psnr(a, b, data_range) for a, b in zip(p, r)]
    finite = [v for v in psnrs if np.isfinite(v)]
    return {
        "MAE": mae(p, r),
        "RMSE": rmse(p, r),
        "SSIM": float(np.mean([ssim(a, b, data_range) for a, b in zip(p, r)])),
        "PSNR": float(np.mean(finite)) if finite else float("inf"),
    }


def iou_per_class(pred, ref, classes: Optional[Sequence[int]] = None) -> Dict[int, float]:
    """|pred & ref| / |pred | ref| per class (NaN when the class is absent from both)."""
    p = np.asarray(pred)
    r = np.asarray(ref)
    if p.shape != r.shape:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {r.shape}")
    if classes is None:
        classes = np.union1d(np.unique(p), np.unique(r)).tolist()
    out = {}
    for c in classes:
        a, b = p == c, r == c
        union = np.logical_or(a, b).sum()
        out[int(c)] = float(np.logical_and(a, b).sum() / union) if union else float("nan")
    return out


def binary_iou(pred_mask, ref_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(ref_mask, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
