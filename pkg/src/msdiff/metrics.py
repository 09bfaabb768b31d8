"""Image fidelity metrics and profile lines."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float) -> float:
    """``10 log10(range^2 / mse)``, capped at 99 dB for identical images."""
    if not data_range > 0:
        raise ValueError("data range must be positive")
    err = mse(a, b)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img, w):
    # Separable correlation, keeping only windows fully inside the image.
    pad = (len(w) - 1) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim(a, b, data_range: float) -> float:
    """Mean local SSIM over Gaussian windows (11 taps, std 1.5)."""
    a, b = _pair(a, b)
    if not data_range > 0:
        raise ValueError("data range must be positive")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be 2-D and at least {SSIM_WINDOW} pixels on a side")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = gaussian_window()
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float
    mse: float
    data_range: float

    @classmethod
    def compare(cls, recon, truth, data_range: float | None = None) -> "MetricsReport":
        truth = np.asarray(truth, dtype=np.float64)
        if data_range is None:
            data_range = float(truth.max() - truth.min()) or 1.0
        return cls(psnr(recon, truth, data_range), ssim(recon, truth, data_range),
                   mse(recon, truth), data_range)


def extract_profile(image, index: int, axis: str = "row") -> np.ndarray:
    image = np.asarray(image)
    if axis not in ("row", "column"):
        raise ValueError("axis must be 'row' or 'column'")
    limit = image.shape[0] if axis == "row" else image.shape[1]
    if not 0 <= index < limit:
        raise IndexError(f"{axis} {index} outside [0, {limit})")
    return image[index, :].copy() if axis == "row" else image[:, index].copy()


def write_profiles(path, profiles: dict[str, np.ndarray]) -> None:
    """One column per named profile, one row per pixel position."""
    names = list(profiles)
    length = {len(p) for p in profiles.values()}
    if len(length) != 1:
        raise ValueError("profiles must share one length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", *names])
        for i in range(length.pop()):
            writer.writerow([i, *(f"{profiles[n][i]:.8g}" for n in names)])


METRIC_COLUMNS = ["method", "views", "psnr", "ssim", "mse_e-3"]


def metrics_row(method: str, views, report: MetricsReport) -> list[str]:
    return [method, str(views), f"{report.psnr:.2f}", f"{report.ssim:.4f}", f"{report.mse * 1e3:.3f}"]
