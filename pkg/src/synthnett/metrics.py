"""Image quality metrics: image distance (ID), PSNR and SSIM, plus ratio curves."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ID_EPS = 1.0 / 256.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DEFAULT_P_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RATIO_HEADER = ("p", "id_ratio", "ssim_ratio", "psnr_ratio", "n_images")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def id_metric(x, xhat, eps: float = ID_EPS) -> float:
    """Fraction of entries with ``|x_i - xhat_i| <= eps``."""
    x, xhat = _pair(x, xhat)
    if eps <= 0:
        raise ValueError("eps must be positive")
    return float(np.mean(np.abs(x - xhat) <= eps))


def psnr(x, xhat, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical inputs."""
    x, xhat = _pair(x, xhat)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, (k, k)), window)


def ssim_map(x, xhat, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    x, xhat = _pair(x, xhat)
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _filter_valid(x, w)
    my = _filter_valid(xhat, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(xhat * xhat, w) - my * my
    sxy = _filter_valid(x * xhat, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, xhat, data_range: float = 1.0) -> float:
    return float(ssim_map(x, xhat, data_range).mean())


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    psnr: float
    id: float

    def get(self, name: str) -> float:
        return getattr(self, name)


def report(x, xhat, eps: float = ID_EPS) -> MetricReport:
    """All three metrics after clamping both images to [0, 1]."""
    x, xhat = _pair(x, xhat)
    x = np.clip(x, 0.0, 1.0)
    xhat = np.clip(xhat, 0.0, 1.0)
    return MetricReport(ssim(x, xhat), psnr(x, xhat), id_metric(x, xhat, eps))


@dataclass(frozen=True)
class RatioRow:
    p: float
    id_ratio: float
    ssim_ratio: float
    psnr_ratio: float
    n_images: int

    def csv_row(self) -> list[str]:
        return [f"{self.p:.2f}", repr(self.id_ratio), repr(self.ssim_ratio), repr(self.psnr_ratio), str(self.n_images)]


def _ratio(num: float, den: float) -> float | None:
    if not (math.isfinite(num) and math.isfinite(den)) or abs(den) < 1e-12:
        return None
    return num / den


def ratio_curve(
    reference: Sequence[MetricReport],
    thresholded: Mapping[float, Sequence[MetricReport]],
    p_grid: Sequence[float] | None = None,
) -> list[RatioRow]:
    """Mean over images of metric(thresholded) / metric(reference) for each p.

    Ratios with a reference below 1e-12 or a non-finite value (e.g. PSNR of
    a perfect match) are treated as missing and left out of the mean; a p
    with no valid ratio for a metric reports NaN.
    """
    grid = list(p_grid) if p_grid is not None else sorted(thresholded)
    rows = []
    for p in grid:
        reps = thresholded[p]
        if len(reps) != len(reference):
            raise ValueError(f"p={p}: {len(reps)} thresholded reports for {len(reference)} references")
        means = []
        for metric in ("id", "ssim", "psnr"):
            vals = [_ratio(t.get(metric), r.get(metric)) for t, r in zip(reps, reference)]
            vals = [v for v in vals if v is not None]
            means.append(float(np.mean(vals)) if vals else math.nan)
        rows.append(RatioRow(float(p), means[0], means[1], means[2], len(reference)))
    return rows
