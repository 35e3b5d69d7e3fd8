"""Oracles shared by several test modules."""

from __future__ import annotations

import numpy as np

from synthnett import phantoms, tfunet, training
from synthnett import tensor as T
from synthnett.tensor import Tape, Tensor


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``arr``."""
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        up = arr.copy()
        dn = arr.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def op_gradient_error(fn, arrays: list[np.ndarray], seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    The scalar under test is ``sum(w * fn(*inputs))`` for a fixed random
    ``w``, so every output entry is exercised.
    """
    rng = np.random.default_rng(seed)
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    w = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float(np.sum(w * fn(*[Tensor(a) for a in arrs]).data))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        y = fn(*leaves)
        loss = T.sum(T.mul(y, Tensor(w)))
    grads = tape.backward(loss)
    worst = 0.0
    for k, a in enumerate(arrays):

        def f(v, k=k):
            args = list(arrays)
            args[k] = v
            return scalar(*args)

        fd = numeric_grad(f, a, h)
        an = grads[leaves[k]]
        err = np.abs(fd - an).max() / max(np.abs(fd).max(), np.abs(an).max(), 1e-12)
        worst = max(worst, float(err))
    return worst


GRADCHECK_STEP = 1e-5
GRADCHECK_SAMPLES = 6


def loss_gradient_report(seed: int = 0, size: int = 16) -> list[tuple[str, str, float]]:
    """Per-parameter-group gradient check of the full training loss.

    For both variants, sampled entries of every group are compared with
    central differences. The error of a group is
    ``||fd - an|| / max(||fd||, ||an||, 1e-6 * ||grad||)``, where the last
    term, the norm of the full gradient, only matters for groups whose
    exact gradient is zero (convolution biases followed by batch norm).
    """
    img = phantoms.generate(phantoms.random_spec(size, 3))[None, None]
    mu = training.default_mu(200)
    weights = training.default_level_weights(3)
    rows = []
    for bypass in (True, False):
        params = tfunet.init_params(tfunet.ArchConfig(bypass=bypass), seed)
        params = training.match_output_moments(params, img)
        res = training.loss(params.copy(), img, mu, weights)
        full_norm = np.sqrt(sum(float(np.sum(np.asarray(res.grads[n]) ** 2)) for n in params.tensors))
        rng = np.random.default_rng(seed)
        for name, t in params.tensors.items():
            an_all = np.asarray(res.grads[name]).ravel()
            idx = rng.choice(t.size, size=min(GRADCHECK_SAMPLES, t.size), replace=False)
            fd = np.empty(len(idx))
            for j, i in enumerate(idx):
                e = np.zeros(t.size)
                e[i] = GRADCHECK_STEP
                e = e.reshape(t.shape)
                lp = training.loss(params.with_tensors({name: Tensor(t.data + e)}), img, mu, weights, grads=False).total
                lm = training.loss(params.with_tensors({name: Tensor(t.data - e)}), img, mu, weights, grads=False).total
                fd[j] = (lp - lm) / (2 * GRADCHECK_STEP)
            an = an_all[idx]
            den = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-6 * full_norm)
            rows.append(("bypass" if bypass else "nobypass", name, float(np.linalg.norm(fd - an) / den)))
    return rows
