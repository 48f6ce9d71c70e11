"""PSNR, SSIM and MS-SSIM.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated over the valid
region, with ``K1 = 0.01``, ``K2 = 0.03``.  Inputs with three axes are
treated as a stack of slices and the per-slice values are averaged.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["PSNR_CAP", "MS_SSIM_WEIGHTS", "MetricsReport", "psnr", "ssim", "ms_ssim", "evaluate"]

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN = 11
_SIGMA = 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def _gauss_window() -> np.ndarray:
    x = np.arange(_WIN) - (_WIN - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * _SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    r = (win.size - 1) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over the valid region."""
    if min(a.shape) < _WIN:
        raise ValueError(f"SSIM needs images of at least {_WIN}x{_WIN}, got {a.shape}")
    win = _gauss_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _per_slice(fn, a, b, **kw) -> float:
    a, b = _pair(a, b)
    if a.ndim == 2:
        return fn(a, b, **kw)
    if a.ndim == 3:
        return float(np.mean([fn(x, y, **kw) for x, y in zip(a, b)]))
    raise ValueError("expected a 2D image or a (slice, H, W) stack")


def _ssim2d(a, b, data_range=1.0):
    if np.array_equal(a, b):
        return 1.0
    return _ssim_terms(a, b, data_range)[0]


def ssim(a, b, data_range: float = 1.0) -> float:
    return _per_slice(_ssim2d, a, b, data_range=data_range)


def _n_scales(shape: tuple[int, int], requested: int) -> int:
    m = requested
    while m > 1 and min(shape) / 2 ** (m - 1) < _WIN:
        m -= 1
    return m


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _ms_ssim2d(a, b, data_range=1.0, scales=5):
    if np.array_equal(a, b):
        return 1.0
    m = _n_scales(a.shape, scales)
    weights = np.asarray(MS_SSIM_WEIGHTS[:m])
    weights = weights / weights.sum()
    vals = []
    for j in range(m):
        s_val, cs_val = _ssim_terms(a, b, data_range)
        vals.append(s_val if j == m - 1 else cs_val)
        if j < m - 1:
            a, b = _downsample(a), _downsample(b)
    vals = np.maximum(np.asarray(vals), 0.0)
    return float(np.prod(vals ** weights))


def ms_ssim(a, b, data_range: float = 1.0, scales: int = 5) -> float:
    """Multi-scale SSIM; coarse scales are dropped (weights renormalized) for
    images too small to keep an 11-pixel window at every scale."""
    return _per_slice(_ms_ssim2d, a, b, data_range=data_range, scales=scales)


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    ms_ssim: float
    data_range: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["psnr", "ssim", "ms_ssim", "data_range"])
        w.writerow([f"{self.psnr:.6f}", f"{self.ssim:.6f}", f"{self.ms_ssim:.6f}", self.data_range])
        return buf.getvalue()


def evaluate(a, b, data_range: float = 1.0) -> MetricsReport:
    return MetricsReport(psnr(a, b, data_range), ssim(a, b, data_range),
                         ms_ssim(a, b, data_range), data_range)
