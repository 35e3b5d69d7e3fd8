"""Autoencoder training with an l1 penalty on the high-pass coefficients.

For a batch ``x_1..x_B`` the loss is::

    E = 1/B sum_i ||decode(encode(x_i)) - x_i||_2^2
        + mu/B sum_i sum_l w_l sum_{a in h,v,d} ||coef_{l,a}(x_i)||_1

where the reconstruction norm is summed over pixels. The coarse low-pass
and bypass stacks are never penalised.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import formats
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    l1_norm,
    l2_norm_squared,
    scale,
    sub,
)
from .tfunet import ArchConfig, NetworkParams, decode, encode, init_params

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_mse", "mean_l1")


def default_mu(n_train: int, exponent: float = -9.5) -> float:
    """Penalty weight ``10**exponent * N``."""
    return 10.0**exponent * n_train


def default_level_weights(levels: int) -> tuple[float, ...]:
    """``w_l = 2**-l`` with l = 1 the finest level."""
    return tuple(2.0 ** -(lvl + 1) for lvl in range(levels))


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the full-scale experiment.

    ``mu=None`` resolves to ``10**mu_exponent * n`` with ``n`` the number of
    training images actually used; ``level_weights=None`` resolves to
    ``2**-l``.
    """

    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mu: float | None = None
    mu_exponent: float = -9.5
    level_weights: tuple[float, ...] | None = None
    image_size: int = 256
    n_train: int = 1500
    n_val: int = 500
    train_dir: str | None = None
    val_dir: str | None = None
    checkpoint_every: int = 0
    seed: int = 0
    output_init: str = "data"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.output_init not in ("data", "none"):
            raise ValueError(f"unknown output_init {self.output_init!r}")
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.level_weights is not None:
            self.level_weights = tuple(float(w) for w in self.level_weights)
            if any(w <= 0 for w in self.level_weights):
                raise ValueError("level weights must be positive")

    def resolved_mu(self, n_train: int | None = None) -> float:
        return self.mu if self.mu is not None else default_mu(n_train or self.n_train, self.mu_exponent)

    def resolved_weights(self, levels: int) -> tuple[float, ...]:
        w = self.level_weights if self.level_weights is not None else default_level_weights(levels)
        if len(w) != levels:
            raise ValueError(f"{len(w)} level weights for {levels} levels")
        return w


def full_scale() -> tuple[TrainConfig, ArchConfig]:
    """256x256 images, 1500 training images, 60 epochs."""
    return TrainConfig(), ArchConfig()


def desk_scale() -> tuple[TrainConfig, ArchConfig]:
    """64x64 images, 200 training images, 15 epochs."""
    return TrainConfig(epochs=15, image_size=64, n_train=200, n_val=50), ArchConfig()


# --------------------------------------------------------------------------
# loss


@dataclass
class LossResult:
    total: float
    data_term: float
    penalty: float
    mse: float
    mean_l1: float
    grads: dict[str, np.ndarray] | None = None


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty batch of images, got shape {x.shape}")
    return x


def loss_terms(params: NetworkParams, x: Tensor, mu: float, weights, mode: str):
    """Build the loss on the active tape; returns (total, data, penalty, xi, recon) tensors."""
    B = x.shape[0]
    xi = encode(params, x, mode)
    recon = decode(params, xi, mode)
    data = scale(l2_norm_squared(sub(recon, x)), 1.0 / B)
    pen = None
    for w, bands in zip(weights, xi.high):
        for t in bands:
            term = scale(l1_norm(t), w)
            pen = term if pen is None else add(pen, term)
    pen = scale(pen, mu / B)
    return add(data, pen), data, pen, xi, recon


def loss(params: NetworkParams, images, mu: float, weights, mode: str = "train", grads: bool = True) -> LossResult:
    """Evaluate the training loss on a batch, with parameter gradients.

    In ``"train"`` mode batch statistics are used and the running batch-norm
    statistics of ``params`` are updated.
    """
    x = Tensor(_as_batch(images))
    weights = tuple(weights)
    if len(weights) != params.config.levels:
        raise ValueError(f"{len(weights)} level weights for {params.config.levels} levels")
    p = params.trainable() if grads else params
    with Tape() as tape:
        try:
            total, data, pen, xi, recon = loss_terms(p, x, mu, weights, mode)
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss evaluation failed: {exc}") from exc
    g = None
    if grads:
        gr = tape.backward(total)
        g = {name: gr.get(t) for name, t in p.tensors.items()}
    high = np.concatenate([t.data.ravel() for t in xi.high_only()])
    return LossResult(
        total.item(),
        data.item(),
        pen.item(),
        float(np.mean((recon.data - x.data) ** 2)),
        float(np.abs(high).mean()),
        g,
    )


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> AdamState:
        return cls(
            {n: np.zeros(t.shape) for n, t in params.tensors.items()},
            {n: np.zeros(t.shape) for n, t in params.tensors.items()},
            0,
        )


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.step + 1
    m, v, updates = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if state.m[name].shape != g.shape:
            raise ValueError(f"Adam state for {name} has shape {state.m[name].shape}, gradient {g.shape}")
        m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mhat = m[name] / (1 - beta1**t)
        vhat = v[name] / (1 - beta2**t)
        updates[name] = Tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps), requires_grad=p.requires_grad, name=name)
    return params.with_tensors(updates), AdamState(m, v, t)


def save_adam(directory, state: AdamState) -> None:
    entries = [(f"m.{n}", a, "adam-m") for n, a in state.m.items()] + [(f"v.{n}", a, "adam-v") for n, a in state.v.items()]
    formats.write_store(directory, entries, "adam", {"step": state.step})


def load_adam(directory) -> AdamState:
    manifest, arrays = formats.read_store(directory, "adam")
    m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
    v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
    return AdamState(m, v, int(manifest["meta"]["step"]))


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_mse: float
    mean_l1: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[EpochMetrics]
    adam: AdamState
    mu: float
    weights: tuple[float, ...]
    seconds: float = 0.0


def match_output_moments(params: NetworkParams, images: np.ndarray) -> NetworkParams:
    """Start the output batch norm at the pixel mean and std of ``images``.

    In train mode the output batch norm fixes the batch standard deviation
    of the reconstruction to ``|gamma|``; starting at gamma = 1 leaves the
    first few hundred Adam steps spent shrinking it towards the image scale.
    """
    return params.with_tensors(
        {
            "out.bn.gamma": Tensor(np.full(params.config.in_channels, images.std()), requires_grad=True, name="out.bn.gamma"),
            "out.bn.beta": Tensor(np.full(params.config.in_channels, images.mean()), requires_grad=True, name="out.bn.beta"),
        }
    )


def evaluate(params: NetworkParams, images, mu: float, weights, batch_size: int = 8) -> EpochMetrics:
    """Validation loss, per-pixel MSE and mean |high-pass coefficient| in eval mode."""
    x = _as_batch(images)
    n = x.shape[0]
    tot = mse = l1 = 0.0
    for start in range(0, n, batch_size):
        chunk = x[start : start + batch_size]
        r = loss(params, chunk, mu, weights, mode="eval", grads=False)
        tot += r.total * len(chunk)
        mse += r.mse * len(chunk)
        l1 += r.mean_l1 * len(chunk)
    return EpochMetrics(-1, float("nan"), tot / n, mse / n, l1 / n)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def write_metrics(path, history: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for h in history:
            w.writerow(h.row())


def save_checkpoint(directory, params: NetworkParams, adam: AdamState, epoch: int, history, mu, weights) -> Path:
    d = Path(directory)
    formats.save_params(d / "weights", params, {"epoch": epoch})
    save_adam(d / "adam", adam)
    state = {"epoch": epoch, "mu": mu, "weights": list(weights), "history": [asdict(h) for h in history]}
    (d / "state.json").write_text(json.dumps(state, indent=1))
    return d


def load_checkpoint(directory):
    d = Path(directory)
    params = formats.load_params(d / "weights")
    adam = load_adam(d / "adam")
    state = json.loads((d / "state.json").read_text())
    history = [EpochMetrics(**h) for h in state["history"]]
    return params, adam, state["epoch"], history


def train(
    config: TrainConfig,
    arch: ArchConfig,
    train_images,
    val_images,
    out_dir=None,
    resume_from=None,
    init: NetworkParams | None = None,
) -> TrainResult:
    """Train a tight frame U-net.

    Each epoch visits the training images in a permutation seeded by
    ``(seed, epoch)``, so resuming from a checkpoint replays the same data
    order. Epoch 0 of the history is the untrained network. When
    ``out_dir`` is given, ``metrics.csv``, the final ``weights`` and
    (every ``checkpoint_every`` epochs) ``checkpoints/epoch_NNNN`` are
    written there.
    """
    t0 = time.perf_counter()
    xs = _as_batch(train_images)
    xv = _as_batch(val_images)
    arch.check_size(*xs.shape[2:])
    n = xs.shape[0]
    mu = config.resolved_mu(n)
    weights = config.resolved_weights(arch.levels)
    out = Path(out_dir) if out_dir is not None else None

    if resume_from is not None:
        params, adam, start, history = load_checkpoint(resume_from)
        if params.config != arch:
            raise ValueError("checkpoint architecture differs from the requested one")
    else:
        params = init if init is not None else init_params(arch, config.seed)
        params = params.copy()
        if config.output_init == "data" and arch.batchnorm:
            params = match_output_moments(params, xs)
        adam = AdamState.zeros_like(params)
        start = 0
        m0 = evaluate(params.frozen(), xv, mu, weights, config.batch_size)
        history = [EpochMetrics(0, float("nan"), m0.val_loss, m0.val_mse, m0.mean_l1)]

    for epoch in range(start + 1, config.epochs + 1):
        perm = epoch_permutation(config.seed, epoch, n)
        batch_losses = []
        for b in range(0, n, config.batch_size):
            idx = perm[b : b + config.batch_size]
            r = loss(params, xs[idx], mu, weights, mode="train")
            params, adam = adam_step(params, r.grads, adam, config.lr, config.beta1, config.beta2, config.adam_eps)
            batch_losses.append(r.total)
        m = evaluate(params.frozen(), xv, mu, weights, config.batch_size)
        rec = EpochMetrics(epoch, float(np.mean(batch_losses)), m.val_loss, m.val_mse, m.mean_l1)
        if not np.isfinite(rec.val_loss):
            raise NonFiniteError(f"validation loss not finite at epoch {epoch}")
        history.append(rec)
        logger.info(
            "epoch %d train_loss %.6g val_loss %.6g val_mse %.3g mean_l1 %.4g",
            epoch, rec.train_loss, rec.val_loss, rec.val_mse, rec.mean_l1,
        )
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}", params, adam, epoch, history, mu, weights)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        formats.save_params(out / "weights", params, {"epochs": config.epochs, "mu": mu, "level_weights": list(weights)})
        write_metrics(out / "metrics.csv", history)
    return TrainResult(params, history, adam, mu, weights, time.perf_counter() - t0)
