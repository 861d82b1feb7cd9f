"""Image quality metrics and the evaluation report."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .errors import InvalidInputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidInputError("empty image")
    return a, b


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    pred, target = _check_pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, k):
    # separable "valid" correlation along both image axes
    n = k.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ k


def ssim(pred, target) -> float:
    """Gaussian-window SSIM on the channel-mean luminance, averaged over the valid region."""
    pred, target = _check_pair(pred, target)
    if pred.ndim == 3:
        pred, target = pred.mean(-1), target.mean(-1)
    if min(pred.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW} pixels on each side for SSIM")
    k = _gaussian_kernel()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_x, mu_y = _filter_valid(pred, k), _filter_valid(target, k)
    sxx = _filter_valid(pred * pred, k) - mu_x**2
    syy = _filter_valid(target * target, k) - mu_y**2
    sxy = _filter_valid(pred * target, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def eval_report(rows) -> str:
    """CSV text ``frame,psnr,ssim`` with a trailing ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "psnr", "ssim"])
    for name, p, s in rows:
        w.writerow([name, f"{p:.6f}", f"{s:.6f}"])
    if rows:
        w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"])
    return buf.getvalue()
