"""Sparse approximation by thresholding encoded coefficients.

Within every participating channel, a 2-D slice per level, band, batch item
and channel index, the ``floor(p * m)`` entries of smallest magnitude are
set to zero. Ties are broken by lowest flat index, which makes the
supports for increasing ``p`` nested.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .metrics import MetricReport, RatioRow
from .tensor import Tensor
from .tfunet import CoeffPyramid, NetworkParams, decode, encode, zero_bypass


@dataclass(frozen=True)
class ThresholdPlan:
    """Fraction ``p`` and which coefficient stacks take part."""

    p: float
    high: bool = True
    coarse: bool = True
    bypass: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    def includes(self, entry: str) -> bool:
        if entry == "coarse":
            return self.coarse
        if entry.startswith("bypass"):
            return self.bypass
        return self.high


def zero_smallest(channels: np.ndarray, p: float) -> np.ndarray:
    """Zero the ``floor(p * m)`` smallest-magnitude entries of each row of an (n, m) array."""
    n, m = channels.shape
    k = int(np.floor(p * m))
    out = channels.copy()
    if k == 0:
        return out
    order = np.argsort(np.abs(channels), axis=1, kind="stable")[:, :k]
    np.put_along_axis(out, order, 0.0, axis=1)
    return out


def threshold_array(arr: np.ndarray, p: float) -> np.ndarray:
    """Threshold every (H, W) channel slice of a (B, C, H, W) array."""
    B, C, H, W = arr.shape
    return zero_smallest(arr.reshape(B * C, H * W), p).reshape(arr.shape)


def threshold_fraction(xi: CoeffPyramid, plan: ThresholdPlan | float) -> CoeffPyramid:
    if not isinstance(plan, ThresholdPlan):
        plan = ThresholdPlan(float(plan))
    return xi.map(lambda name, t: Tensor(threshold_array(t.data, plan.p)) if plan.includes(name) else t.detach())


@dataclass
class SparseResult:
    full: np.ndarray
    thresholded: np.ndarray
    report_full: MetricReport
    report_thresholded: MetricReport


def _image(out: Tensor) -> np.ndarray:
    return out.data[0, 0].copy()


def sparse_reconstruct(params: NetworkParams, x: np.ndarray, p: float | ThresholdPlan) -> SparseResult:
    """Decode all coefficients and the thresholded ones, scoring both against ``x``."""
    params = params.frozen()
    xi = encode(params, x)
    full = _image(decode(params, xi))
    plan = p if isinstance(p, ThresholdPlan) else ThresholdPlan(float(p))
    thr = full if plan.p == 0 else _image(decode(params, threshold_fraction(xi, plan)))
    return SparseResult(full, thr, metrics.report(x, full), metrics.report(x, thr))


@dataclass
class CurveResult:
    rows: list[RatioRow]
    reference: list[MetricReport]
    per_p: dict[float, list[MetricReport]]


def ratio_experiment(
    params: NetworkParams,
    images: Sequence[np.ndarray],
    p_grid: Sequence[float] = metrics.DEFAULT_P_GRID,
    plan: ThresholdPlan | None = None,
    batch_size: int = 16,
) -> CurveResult:
    """Metric ratios (thresholded / all coefficients) over a set of images."""
    params = params.frozen()
    base = plan or ThresholdPlan(0.0)
    imgs = np.asarray(images, dtype=np.float64)
    reference: list[MetricReport] = []
    per_p: dict[float, list[MetricReport]] = {float(p): [] for p in p_grid}
    for start in range(0, len(imgs), batch_size):
        chunk = imgs[start : start + batch_size]
        xi = encode(params, chunk[:, None])
        full = decode(params, xi).data[:, 0]
        reference += [metrics.report(x, f) for x, f in zip(chunk, full)]
        for p in p_grid:
            pl = ThresholdPlan(float(p), base.high, base.coarse, base.bypass)
            rec = decode(params, threshold_fraction(xi, pl)).data[:, 0]
            per_p[float(p)] += [metrics.report(x, r) for x, r in zip(chunk, rec)]
    rows = metrics.ratio_curve(reference, per_p, [float(p) for p in p_grid])
    return CurveResult(rows, reference, per_p)


def run_experiment(
    params_bypass: NetworkParams,
    params_nobypass: NetworkParams,
    images: Sequence[np.ndarray],
    p_grid: Sequence[float] = metrics.DEFAULT_P_GRID,
    plan: ThresholdPlan | None = None,
) -> dict[str, CurveResult]:
    """Ratio curves for both network variants on the same images."""
    if not params_bypass.config.bypass or params_nobypass.config.bypass:
        raise ValueError("expected a bypass network and a no-bypass network, in that order")
    return {
        "bypass": ratio_experiment(params_bypass, images, p_grid, plan),
        "nobypass": ratio_experiment(params_nobypass, images, p_grid, plan),
    }


def write_ratio_csv(path, rows: Sequence[RatioRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics.RATIO_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def write_detail_csv(path, result: CurveResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image", "p", "id", "ssim", "psnr"))
        for i, r in enumerate(result.reference):
            w.writerow((i, "full", repr(r.id), repr(r.ssim), repr(r.psnr)))
        for p, reps in result.per_p.items():
            for i, r in enumerate(reps):
                w.writerow((i, f"{p:.2f}", repr(r.id), repr(r.ssim), repr(r.psnr)))


def bypass_zeroing(params: NetworkParams, images: Sequence[np.ndarray]) -> tuple[list[MetricReport], list[MetricReport]]:
    """Reports for decode(encode(x)) and decode(zero_bypass(encode(x)))."""
    params = params.frozen()
    imgs = np.asarray(images, dtype=np.float64)
    xi = encode(params, imgs[:, None])
    full = decode(params, xi).data[:, 0]
    zeroed = decode(params, zero_bypass(xi)).data[:, 0]
    return [metrics.report(x, f) for x, f in zip(imgs, full)], [metrics.report(x, z) for x, z in zip(imgs, zeroed)]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
