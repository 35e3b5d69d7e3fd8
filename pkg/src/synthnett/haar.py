"""Fixed 2-D Haar tight-frame filter bank.

The four 2x2 filters are tensor products of the 1-D Haar low-pass
``L = [1, 1] / sqrt(2)`` and high-pass ``H = [1, -1] / sqrt(2)``:

====  ==========  ===========================================
band  product     responds to
====  ==========  ===========================================
low   L L^T       local mean
h     H L^T       variation along rows (horizontal edges)
v     L H^T       variation along columns (vertical edges)
d     H H^T       diagonal structure
====  ==========  ===========================================

The filters are orthonormal, so analysis followed by synthesis is the
identity (frame constant 1). Both directions run through the differentiable
stride-2 convolutions of :mod:`synthnett.tensor`, each channel filtered
independently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, conv2d, conv2d_transpose, getitem, reshape, stack

_LO = np.array([1.0, 1.0]) / np.sqrt(2.0)
_HI = np.array([1.0, -1.0]) / np.sqrt(2.0)

BANDS = ("low", "h", "v", "d")
FILTERS = {
    "low": np.outer(_LO, _LO),
    "h": np.outer(_HI, _LO),
    "v": np.outer(_LO, _HI),
    "d": np.outer(_HI, _HI),
}

# (4, 1, 2, 2): one output channel per band
_BANK = Tensor(np.stack([FILTERS[b] for b in BANDS])[:, None])
# (4, 4, 2, 2) block-diagonal: keeps the four bands in separate channels
_BANK_SEPARATE = Tensor(np.einsum("ab,bij->abij", np.eye(4), np.stack([FILTERS[b] for b in BANDS])))


def _check_even(shape) -> None:
    if len(shape) != 4:
        raise ValueError(f"expected (B, C, H, W), got {shape}")
    if shape[2] % 2 or shape[3] % 2:
        raise ValueError(f"Haar analysis needs even height and width, got {shape[2]}x{shape[3]}")


def analysis(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split (B, C, H, W) into ``(low, h, v, d)`` subbands of size H/2 x W/2."""
    _check_even(x.shape)
    B, C, H, W = x.shape
    sub = conv2d(reshape(x, (B * C, 1, H, W)), _BANK, stride=2)
    sub = reshape(sub, (B, C, 4, H // 2, W // 2))
    return tuple(getitem(sub, (slice(None), slice(None), i)) for i in range(4))


def _stacked(low: Tensor, h: Tensor, v: Tensor, d: Tensor) -> Tensor:
    shape = low.shape
    if len(shape) != 4:
        raise ValueError(f"subbands must be (B, C, H, W), got {shape}")
    for name, t in zip(BANDS, (low, h, v, d)):
        if t.shape != shape:
            raise ValueError(f"subband {name} has shape {t.shape}, expected {shape}")
    B, C, H, W = shape
    return reshape(stack([low, h, v, d], axis=2), (B * C, 4, H, W))


def synthesis(low: Tensor, h: Tensor, v: Tensor, d: Tensor) -> Tensor:
    """Adjoint of :func:`analysis`: sum of the upsampled, filtered subbands."""
    B, C, H, W = low.shape
    out = conv2d_transpose(_stacked(low, h, v, d), _BANK, stride=2)
    return reshape(out, (B, C, 2 * H, 2 * W))


def synthesis_bands(low: Tensor, h: Tensor, v: Tensor, d: Tensor) -> Tensor:
    """Upsample and filter each subband without summing.

    Returns (B, 4*C, 2H, 2W); channel ``4*c + j`` holds band ``BANDS[j]`` of
    input channel ``c``. Summing the four bands of a channel gives
    :func:`synthesis`.
    """
    B, C, H, W = low.shape
    out = conv2d_transpose(_stacked(low, h, v, d), _BANK_SEPARATE, stride=2)
    return reshape(out, (B, 4 * C, 2 * H, 2 * W))


def frame_operator(x: Tensor) -> Tensor:
    """Apply sum over bands of (synthesis o analysis), i.e. H_h H_h^T + ... + L L^T."""
    return synthesis(*analysis(x))


@dataclass(frozen=True)
class FrameReport:
    trials: int
    height: int
    width: int
    seed: int
    c_estimate: float
    max_deviation: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def frame_check(trials: int = 10, size: tuple[int, int] = (64, 64), seed: int = 0) -> FrameReport:
    """Estimate the frame constant on random images.

    ``c_estimate`` is the least-squares fit of ``S x ~ c x`` over all trials
    and ``max_deviation`` the largest entry of ``|S x - c x|``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    H, W = size
    _check_even((1, 1, H, W))
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((trials, 1, H, W))
    sx = frame_operator(Tensor(xs)).data
    c = float(np.vdot(sx, xs) / np.vdot(xs, xs))
    dev = float(np.abs(sx - c * xs).max())
    return FrameReport(trials, H, W, seed, c, dev)
