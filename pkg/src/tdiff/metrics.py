"""PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    # separable correlation, then crop to positions where the window fits
    half = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:x.shape[0] - half, half:x.shape[1] - half]


def ssim_map(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image extent {a.shape} smaller than the {window}px SSIM window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0, **kw) -> float:
    """Mean SSIM over all positions where the Gaussian window fits."""
    return float(np.mean(ssim_map(a, b, peak, **kw)))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_image: list[dict] = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs, peak: float = 1.0) -> "MetricReport":
        """``pairs`` yields ``(image_id, estimate, reference)``."""
        rows = []
        for image_id, est, ref in pairs:
            rows.append({"id": image_id, "psnr_db": psnr(est, ref, peak), "ssim": ssim(est, ref, peak)})
        if not rows:
            return cls(math.nan, math.nan, [])
        return cls(
            float(np.mean([r["psnr_db"] for r in rows])),
            float(np.mean([r["ssim"] for r in rows])),
            rows,
        )
