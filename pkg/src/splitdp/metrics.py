"""MSE, SSIM and PSNR between an original and a reconstructed image.

Images are ``(H, W)`` or ``(H, W, C)`` arrays on the 0-255 scale.  SSIM is
the single-window (global) form computed per channel and averaged; it is not
clamped, so images with negatively correlated pixels give negative values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

PEAK = 255.0


@dataclass(frozen=True)
class SsimParams:
    c1: float = (0.01 * PEAK) ** 2
    c2: float = (0.03 * PEAK) ** 2
    dynamic_range: float = PEAK

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("SSIM constants must be positive")


@dataclass(frozen=True)
class MetricsRecord:
    mse: float
    ssim: float
    psnr: float
    image_id: str = ""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InputError("empty images")
    return a, b


def mse(a, b) -> float:
    """Mean squared pixel difference over every element."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """``10 log10(255^2 / MSE)`` in dB; ``inf`` for identical images."""
    return psnr_from_mse(mse(a, b))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / value)


def ssim(a, b, params: SsimParams | None = None) -> float:
    params = params or SsimParams()
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    da, db = a - mu_a, b - mu_b
    var_a = (da ** 2).mean(axis=0)
    var_b = (db ** 2).mean(axis=0)
    cov = (da * db).mean(axis=0)
    num = (2 * mu_a * mu_b + params.c1) * (2 * cov + params.c2)
    den = (mu_a ** 2 + mu_b ** 2 + params.c1) * (var_a + var_b + params.c2)
    return float(np.mean(num / den))


def compute_metrics(original, reconstructed, image_id: str = "",
                    params: SsimParams | None = None) -> MetricsRecord:
    m = mse(original, reconstructed)
    return MetricsRecord(mse=m, ssim=ssim(original, reconstructed, params),
                         psnr=psnr_from_mse(m), image_id=image_id)
