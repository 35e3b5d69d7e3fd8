"""Sparse synthesis reconstruction with a frozen decoder.

Given data ``y``, a linear forward operator ``A`` and a trained decoder
``Phi``, minimise over coefficient pyramids ``xi``::

    S(xi) = ||A Phi(xi) - y||^2 + mu * sum_lambda w_lambda |xi_lambda|

by proximal gradient descent. The gradient of the data term is obtained by
differentiating through the decoder (batch norm in eval mode); the proximal
map of the weighted l1 term is soft thresholding. Step sizes come from a
backtracking line search on the smooth term, so every accepted step
decreases ``S``. Optional momentum is restarted whenever the objective
would increase.

``Phi`` is nonlinear, so only stationarity can be expected; the best
iterate found is returned.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import NonFiniteError, Tape
from .tfunet import CoeffPyramid, NetworkParams, decode, encode, zeros_like_layout


class AdjointMismatch(ValueError):
    """Forward operator failed the adjoint test."""


class SolverDiverged(NonFiniteError):
    """Non-finite objective; ``state`` holds the last accepted iterate and history."""

    def __init__(self, message: str, state: SolverState):
        super().__init__(message)
        self.state = state


# --------------------------------------------------------------------------
# forward operators


class ForwardOperator:
    """Linear map from (H, W) images to data arrays, with its adjoint."""

    name = "operator"

    def __init__(self, shape: tuple[int, int]):
        self.shape = tuple(int(s) for s in shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint_error(self, trials: int = 5, seed: int = 0) -> float:
        """Largest ``|<Ax, y> - <x, A^T y>| / (||Ax|| ||y||)`` over random pairs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            x = rng.standard_normal(self.shape)
            ax = self.apply(x)
            y = rng.standard_normal(ax.shape)
            lhs = float(np.vdot(ax, y))
            rhs = float(np.vdot(x, self.adjoint(y)))
            scale = max(np.linalg.norm(ax) * np.linalg.norm(y), np.linalg.norm(x) * np.linalg.norm(self.adjoint(y)), 1e-300)
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst

    def norm_estimate(self, iters: int = 50, seed: int = 0) -> float:
        """Operator norm by power iteration on ``A^T A``."""
        x = np.random.default_rng(seed).standard_normal(self.shape)
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(iters):
            z = self.adjoint(self.apply(x))
            lam = float(np.linalg.norm(z))
            if lam == 0.0:
                return 0.0
            x = z / lam
        return math.sqrt(lam)


class Identity(ForwardOperator):
    name = "identity"

    def apply(self, x):
        return np.array(x, dtype=np.float64)

    def adjoint(self, y):
        return np.array(y, dtype=np.float64)


class Mask(ForwardOperator):
    """Restriction to known pixels; the data is the vector of known values."""

    name = "mask"

    def __init__(self, known: np.ndarray):
        known = np.asarray(known, dtype=bool)
        if known.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not known.any():
            raise ValueError("mask has no known pixels")
        super().__init__(known.shape)
        self.known = known

    @classmethod
    def random(cls, shape, fraction: float = 0.5, seed: int = 0) -> Mask:
        """Exactly ``round(fraction * H * W)`` known pixels chosen uniformly."""
        n = int(np.prod(shape))
        k = int(round(fraction * n))
        idx = np.random.default_rng(seed).permutation(n)[:k]
        known = np.zeros(n, dtype=bool)
        known[idx] = True
        return cls(known.reshape(shape))

    def apply(self, x):
        return np.asarray(x, dtype=np.float64)[self.known]

    def adjoint(self, y):
        out = np.zeros(self.shape)
        out[self.known] = y
        return out


class Blur(ForwardOperator):
    """Convolution with a normalised nonnegative stencil, periodic boundary.

    The adjoint is correlation with the same stencil, i.e. convolution with
    the flipped stencil.
    """

    name = "blur"

    def __init__(self, stencil: np.ndarray, shape: tuple[int, int]):
        stencil = np.asarray(stencil, dtype=np.float64)
        if stencil.ndim != 2 or stencil.shape[0] % 2 == 0 or stencil.shape[1] % 2 == 0:
            raise ValueError("blur stencil must be 2-D with odd side lengths")
        if (stencil < 0).any() or not math.isclose(stencil.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("blur stencil must be nonnegative and sum to 1")
        super().__init__(shape)
        self.stencil = stencil

    @classmethod
    def gaussian(cls, shape, size: int = 5, sigma: float = 1.0) -> Blur:
        r = np.arange(size) - size // 2
        g = np.exp(-(r**2) / (2 * sigma**2))
        k = np.outer(g, g)
        return cls(k / k.sum(), shape)

    @classmethod
    def box(cls, shape, size: int = 3) -> Blur:
        return cls(np.full((size, size), 1.0 / size**2), shape)

    def apply(self, x):
        return ndimage.convolve(np.asarray(x, dtype=np.float64), self.stencil, mode="wrap")

    def adjoint(self, y):
        return ndimage.correlate(np.asarray(y, dtype=np.float64), self.stencil, mode="wrap")


# --------------------------------------------------------------------------
# objective pieces


def soft_threshold(v, t):
    """``sign(v) * max(|v| - t, 0)`` entrywise; thresholds must be nonnegative."""
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any():
        raise ValueError("soft_threshold needs nonnegative thresholds")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass
class SolverConfig:
    """Settings for :func:`solve`.

    High-pass coefficients of level ``l`` carry weight ``level_weights[l-1]``
    (default ``2**-l``). The coarse and bypass stacks are unpenalised by
    default.
    """

    mu: float = 1e-3
    level_weights: tuple[float, ...] | None = None
    coarse_weight: float = 0.0
    bypass_weight: float = 0.0
    max_iter: int = 500
    step0: float = 1.0
    backtrack: float = 0.5
    step_growth: float = 1.5
    min_step: float = 1e-16
    tol: float = 1e-6
    patience: int = 5
    accelerate: bool = False
    init: str = "encode"
    adjoint_tol: float = 1e-10

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.level_weights is not None:
            self.level_weights = tuple(float(w) for w in self.level_weights)
            if min(self.level_weights) <= 0:
                raise ValueError("level weights must be positive on the penalised set")
        if self.coarse_weight < 0 or self.bypass_weight < 0:
            raise ValueError("coarse and bypass weights must be nonnegative")
        if not 0 < self.backtrack < 1 or self.step0 <= 0 or self.step_growth < 1:
            raise ValueError("need step0 > 0, 0 < backtrack < 1 and step_growth >= 1")
        if self.init not in ("encode", "zero"):
            raise ValueError(f"unknown init {self.init!r}")


def weight_vector(layout: CoeffPyramid, config: SolverConfig) -> np.ndarray:
    """Per-coefficient penalty weights in :meth:`CoeffPyramid.flatten` order."""
    levels = layout.levels
    lw = config.level_weights or tuple(2.0 ** -(i + 1) for i in range(levels))
    if len(lw) != levels:
        raise ValueError(f"{len(lw)} level weights for {levels} levels")
    parts = []
    for name, t in layout.entries():
        if name == "coarse":
            w = config.coarse_weight
        elif name.startswith("bypass"):
            w = config.bypass_weight
        else:
            w = lw[int(name[5 : name.index(".")]) - 1]
        parts.append(np.full(t.size, w))
    return np.concatenate(parts)


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    data_term: float
    penalty: float


def objective(xi: CoeffPyramid, y, A: ForwardOperator, params: NetworkParams, mu: float, weights) -> ObjectiveValue:
    """Evaluate ``||A Phi(xi) - y||^2 + mu sum w |xi|``.

    ``weights`` is a flat per-coefficient vector or a :class:`SolverConfig`.
    """
    if isinstance(weights, SolverConfig):
        weights = weight_vector(xi, weights)
    x = decode(params.frozen(), xi.detach(), "eval").data[0, 0]
    r = A.apply(x) - np.asarray(y, dtype=np.float64)
    data = float(np.vdot(r, r))
    pen = float(mu * np.dot(weights, np.abs(xi.flatten())))
    return ObjectiveValue(data + pen, data, pen)


# --------------------------------------------------------------------------
# solver


@dataclass
class HistoryRow:
    iter: int
    data_term: float
    penalty: float
    total: float
    step: float


@dataclass
class SolverState:
    xi: np.ndarray
    momentum: np.ndarray | None
    step: float
    history: list[HistoryRow] = field(default_factory=list)
    converged: bool = False
    restarts: int = 0
    evaluations: int = 0


@dataclass
class SolveResult:
    xi: CoeffPyramid
    x: np.ndarray
    state: SolverState


class _Smooth:
    """``f(v) = ||A Phi(v) - y||^2`` on flat coefficient vectors, with lazy gradients."""

    def __init__(self, params: NetworkParams, layout: CoeffPyramid, A: ForwardOperator, y: np.ndarray):
        self.params = params
        self.layout = layout
        self.A = A
        self.y = y
        self.calls = 0

    def __call__(self, v: np.ndarray):
        """Return ``(f, image, grad_fn)``."""
        self.calls += 1
        leaves = self.layout.unflatten(v).requiring_grad()
        with Tape() as tape:
            out = decode(self.params, leaves, "eval")
        img = out.data[0, 0]
        r = self.A.apply(img) - self.y
        f = float(np.vdot(r, r))

        def grad():
            seed = 2.0 * self.A.adjoint(r)[None, None]
            g = tape.backward(out, seed)
            return np.concatenate([g.get(t).ravel() for t in leaves.tensors()])

        return f, img, grad


def initial_coefficients(params: NetworkParams, A: ForwardOperator, y, init: str = "encode") -> CoeffPyramid:
    if init == "zero":
        return zeros_like_layout(params.config, *A.shape)
    return encode(params, A.adjoint(y)).detach()


def solve(
    y,
    A: ForwardOperator,
    params: NetworkParams,
    config: SolverConfig,
    xi0: CoeffPyramid | None = None,
) -> SolveResult:
    """Minimise the synthesis functional by proximal gradient descent.

    Raises :class:`AdjointMismatch` if ``A`` fails the adjoint test and
    :class:`SolverDiverged` on a non-finite objective.
    """
    err = A.adjoint_error()
    if not err < config.adjoint_tol:
        raise AdjointMismatch(f"{A.name} adjoint test failed: relative error {err:.3g}")
    params = params.frozen()
    y = np.asarray(y, dtype=np.float64)
    layout = xi0 if xi0 is not None else initial_coefficients(params, A, y, config.init)
    w = weight_vector(layout, config)
    smooth = _Smooth(params, layout, A, y)

    def penalty(v):
        return float(config.mu * np.dot(w, np.abs(v)))

    v = layout.flatten()
    f, img, grad_fn = smooth(v)
    g = grad_fn()
    F = f + penalty(v)
    s = config.step0
    state = SolverState(v, None, s, [HistoryRow(0, f, penalty(v), F, 0.0)])
    if not math.isfinite(F):
        raise SolverDiverged("initial objective is not finite", state)
    v_prev = v
    t = 1.0
    z, fz, gz = v, f, g
    calm = 0
    for k in range(1, config.max_iter + 1):
        accepted = False
        while s >= config.min_step:
            cand = soft_threshold(z - s * gz, s * config.mu * w)
            try:
                fc, img_c, grad_c = smooth(cand)
            except NonFiniteError:
                fc = math.inf
            if not math.isfinite(fc):
                state.xi, state.step = v, s
                raise SolverDiverged(f"non-finite objective at iteration {k} (step {s:.3g})", state)
            d = cand - z
            if fc <= fz + float(np.dot(gz, d)) + float(np.dot(d, d)) / (2 * s):
                Fc = fc + penalty(cand)
                if Fc <= F:
                    accepted = True
                    break
                if z is not v:
                    # momentum overshoot: restart from the current iterate
                    state.restarts += 1
                    t = 1.0
                    z, fz, gz = v, f, g
                    continue
            s *= config.backtrack
        if not accepted:
            break
        v_prev, v = v, cand
        F_prev, F, f, img = F, Fc, fc, img_c
        g = grad_c()
        state.history.append(HistoryRow(k, fc, Fc - fc, Fc, s))
        rel = abs(F_prev - F) / max(abs(F_prev), 1e-300)
        calm = calm + 1 if rel < config.tol else 0
        if calm >= config.patience:
            state.converged = True
            break
        if config.accelerate:
            t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            z = v + ((t - 1) / t_next) * (v - v_prev)
            t = t_next
            if t > 1.0 and np.any(z != v):
                fz, _, gfn = smooth(z)
                gz = gfn()
            else:
                z, fz, gz = v, f, g
        else:
            z, fz, gz = v, f, g
        s *= config.step_growth
    state.xi = v
    state.momentum = z if config.accelerate else None
    state.step = s
    state.evaluations = smooth.calls
    return SolveResult(layout.unflatten(v), img.copy(), state)


def write_history(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(("iter", "data_term", "penalty", "total", "step"))
        for h in history:
            wr.writerow((h.iter, repr(h.data_term), repr(h.penalty), repr(h.total), repr(h.step)))


@dataclass(frozen=True)
class ProbeRow:
    delta: float
    mean_drift: float
    std_drift: float
    draws: int


def noise_stability_probe(
    y,
    A: ForwardOperator,
    params: NetworkParams,
    config: SolverConfig,
    deltas: Sequence[float] = (0.0, 0.01, 0.03, 0.1),
    draws: int = 5,
    seed: int = 0,
) -> list[ProbeRow]:
    """Reconstruction drift ``||x_delta - x_0||`` under data perturbations of norm ``delta``."""
    y = np.asarray(y, dtype=np.float64)
    x0 = solve(y, A, params, config).x
    rng = np.random.default_rng(seed)
    rows = []
    for delta in deltas:
        drift = []
        for _ in range(draws if delta > 0 else 1):
            n = rng.standard_normal(y.shape)
            xd = solve(y + delta * n / np.linalg.norm(n), A, params, config).x
            drift.append(float(np.linalg.norm(xd - x0)))
        rows.append(ProbeRow(float(delta), float(np.mean(drift)), float(np.std(drift)), draws))
    return rows
