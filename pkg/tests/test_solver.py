import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthnett import phantoms, solver, tfunet
from synthnett.solver import Blur, Identity, Mask, SolverConfig


def _circular_conv_matrix(stencil, n):
    r = stencil.shape[0] // 2
    M = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    M[i * n + j, ((i - a) % n) * n + (j - b) % n] += stencil[a + r, b + r]
    return M


@pytest.fixture(scope="module")
def net():
    return tfunet.init_params(tfunet.ArchConfig(levels=2, base_channels=2, bypass=False), seed=3).frozen()


@pytest.fixture(scope="module")
def image():
    return phantoms.generate(phantoms.random_spec(16, 4))


# -- soft threshold


def test_soft_threshold_examples():
    assert solver.soft_threshold(1.2, 0.5) == pytest.approx(0.7)
    assert solver.soft_threshold(-0.3, 0.5) == 0.0
    assert solver.soft_threshold(-1.0, 0.25) == -0.75
    v = np.array([-2.0, 0.0, 3.5])
    np.testing.assert_array_equal(solver.soft_threshold(v, 0.0), v)
    with pytest.raises(ValueError):
        solver.soft_threshold(v, np.array([0.1, -0.1, 0.1]))


def test_soft_threshold_brute_force_prox():
    rng = np.random.default_rng(0)
    grid = np.arange(-4.0, 4.0 + 1e-9, 1e-4)
    for v, t in zip(rng.uniform(-3, 3, 100), rng.uniform(0, 2, 100)):
        z = grid[np.argmin(0.5 * (grid - v) ** 2 + t * np.abs(grid))]
        assert abs(solver.soft_threshold(v, t) - z) <= 1e-3


@given(st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(0, 1e3))
def test_soft_threshold_shrinks_monotonically(v, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = solver.soft_threshold(v, lo), solver.soft_threshold(v, hi)
    assert abs(b) <= abs(a) <= abs(v)
    assert a * v >= 0 and b * v >= 0


# -- operators


@pytest.mark.parametrize(
    "op",
    [Identity((8, 8)), Mask.random((8, 8), 0.5, 1), Blur.gaussian((8, 8)), Blur.box((8, 8))],
    ids=["identity", "mask", "gauss", "box"],
)
def test_operator_linearity_and_adjoint(op):
    rng = np.random.default_rng(2)
    x, z = rng.standard_normal((2, 8, 8))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(op.apply(a * x + b * z), a * op.apply(x) + b * op.apply(z), atol=1e-10)
    assert op.adjoint_error() < 1e-10


def test_blur_matches_dense_matrix():
    rng = np.random.default_rng(3)
    stencil = rng.uniform(0, 1, (3, 3))
    stencil /= stencil.sum()
    op = Blur(stencil, (6, 6))
    M = _circular_conv_matrix(stencil, 6)
    x, y = rng.standard_normal((2, 6, 6))
    np.testing.assert_allclose(op.apply(x).ravel(), M @ x.ravel(), atol=1e-13)
    np.testing.assert_allclose(op.adjoint(y).ravel(), M.T @ y.ravel(), atol=1e-13)


def test_blur_constant_and_validation():
    op = Blur.gaussian((12, 12), size=5, sigma=1.3)
    np.testing.assert_allclose(op.apply(np.full((12, 12), 0.37)), 0.37, atol=1e-14)
    with pytest.raises(ValueError):
        Blur(np.full((3, 3), 0.2), (8, 8))
    with pytest.raises(ValueError):
        Blur(np.full((2, 2), 0.25), (8, 8))
    with pytest.raises(ValueError):
        Blur(np.array([[0.5, -0.5, 1.0]]), (8, 8))


def test_mask_properties():
    m = Mask.random((10, 10), 0.5, 0)
    assert m.known.sum() == 50
    y = np.arange(50.0)
    back = m.adjoint(y)
    np.testing.assert_array_equal(m.apply(back), y)
    assert np.all(back[~m.known] == 0)
    assert abs(m.norm_estimate(50) - 1.0) < 1e-6
    with pytest.raises(ValueError):
        Mask(np.zeros((4, 4), dtype=bool))


def test_identity_norm():
    assert Identity((5, 5)).norm_estimate() == pytest.approx(1.0, abs=1e-12)


# -- configuration and objective


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(mu=0.0)
    with pytest.raises(ValueError):
        SolverConfig(level_weights=(0.5, 0.0))
    with pytest.raises(ValueError):
        SolverConfig(init="random")
    with pytest.raises(ValueError):
        SolverConfig(backtrack=1.0)


def test_weight_vector_layout(net):
    layout = tfunet.zeros_like_layout(net.config, 16, 16)
    w = solver.weight_vector(layout, SolverConfig())
    start = 0
    for name, t in layout.entries():
        part = w[start : start + t.size]
        start += t.size
        level = {"level1": 0.5, "level2": 0.25}.get(name.split(".")[0], 0.0)
        assert np.all(part == level), name
    with pytest.raises(ValueError):
        solver.weight_vector(layout, SolverConfig(level_weights=(1.0,)))


def test_objective_trivial_cases():
    p = tfunet.init_params(tfunet.ArchConfig(levels=2, base_channels=2, bypass=False), seed=0)
    xi = tfunet.zeros_like_layout(p.config, 16, 16)
    assert solver.objective(xi, np.zeros((16, 16)), Identity((16, 16)), p, 1.0, SolverConfig()).total == 0.0


def test_objective_direct_recompute(net, image):
    A = Mask.random((16, 16), 0.5, 2)
    y = A.apply(image)
    xi = tfunet.encode(net, image + 0.1)
    cfg = SolverConfig(mu=0.02, coarse_weight=0.1)
    val = solver.objective(xi, y, A, net, cfg.mu, cfg)
    x = tfunet.decode(net, xi).data[0, 0]
    data = sum((x[A.known] - y) ** 2)
    pen = 0.0
    for name, t in xi.entries():
        w = {"level1": 0.5, "level2": 0.25, "coarse": 0.1}[name.split(".")[0]]
        pen += w * np.abs(t.data).sum()
    assert val.data_term == pytest.approx(data, rel=1e-12)
    assert val.penalty == pytest.approx(0.02 * pen, rel=1e-12)
    assert val.total == val.data_term + val.penalty
    zero_mu = solver.objective(xi, y, A, net, 0.0, cfg)
    assert zero_mu.total == zero_mu.data_term


# -- solver


def test_history_monotone_and_consistent(net, image):
    A = Mask.random((16, 16), 0.5, 0)
    res = solver.solve(A.apply(image), A, net, SolverConfig(mu=1e-3, max_iter=60))
    h = res.state.history
    assert len(h) > 1
    for a, b in zip(h, h[1:]):
        assert b.total <= a.total
    for r in h:
        assert abs(r.total - (r.data_term + r.penalty)) <= 1e-12 * max(1.0, abs(r.total))
    final = solver.objective(res.xi, A.apply(image), A, net, 1e-3, SolverConfig(mu=1e-3))
    assert final.total == pytest.approx(h[-1].total, rel=1e-12)
    np.testing.assert_allclose(res.x, tfunet.decode(net, res.xi).data[0, 0], atol=1e-14)


def test_accelerated_best_objective_non_increasing(net, image):
    A = Blur.gaussian((16, 16))
    res = solver.solve(A.apply(image), A, net, SolverConfig(mu=1e-3, max_iter=60, accelerate=True))
    totals = [r.total for r in res.state.history]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert res.state.momentum is not None


def test_identity_self_consistency(image):
    lin = tfunet.identity_params(
        tfunet.ArchConfig(levels=2, base_channels=2, bypass=False, nonlinearity="identity", batchnorm=False)
    )
    y = tfunet.decode(lin, tfunet.encode(lin, image)).data[0, 0]
    res = solver.solve(y, Identity((16, 16)), lin, SolverConfig(mu=1e-6, max_iter=300, init="zero"))
    assert res.state.history[-1].data_term < 1e-4 * np.sum(y**2)


def test_fixed_point_consistency(net, image):
    A = Identity((16, 16))
    y = image
    cfg = SolverConfig(mu=1e-2, max_iter=2000, tol=1e-6)
    res = solver.solve(y, A, net, cfg)
    assert res.state.converged
    more = solver.solve(y, A, net, SolverConfig(mu=1e-2, max_iter=1, step0=res.state.step), xi0=res.xi)
    before, after = more.state.history[0].total, more.state.history[-1].total
    assert abs(before - after) / before < cfg.tol


def test_zero_init_stationary_for_zero_bias_decoder(net, image):
    # zero coefficients give a zero output and every ReLU sits at its kink
    res = solver.solve(image, Identity((16, 16)), net, SolverConfig(max_iter=3, init="zero"))
    assert res.state.history[0].penalty == 0.0
    assert np.all(res.state.xi == 0)


def test_zero_init_descends(net, image):
    shifted = {n: tfunet.Tensor(np.full(net[n].shape, 0.3)) for n in ("dec0.bn.beta", "dec1.bn.beta")}
    biased = net.with_tensors(shifted).frozen()
    res = solver.solve(image, Identity((16, 16)), biased, SolverConfig(max_iter=3, init="zero"))
    assert res.state.history[-1].total < res.state.history[0].total


def test_refuses_bad_adjoint(net, image):
    class Broken(Identity):
        def adjoint(self, y):
            return 2.0 * np.asarray(y)

    with pytest.raises(solver.AdjointMismatch):
        solver.solve(image, Broken((16, 16)), net, SolverConfig())


def test_divergence_raises_with_state(net, image):
    with np.errstate(all="ignore"), pytest.raises(solver.SolverDiverged) as info:
        solver.solve(image * 1e300, Identity((16, 16)), net, SolverConfig())
    assert info.value.state.xi is not None
    assert not math.isfinite(info.value.state.history[0].total)


def test_deterministic(net, image):
    A = Mask.random((16, 16), 0.5, 3)
    a = solver.solve(A.apply(image), A, net, SolverConfig(max_iter=20))
    b = solver.solve(A.apply(image), A, net, SolverConfig(max_iter=20))
    np.testing.assert_array_equal(a.x, b.x)


def test_write_history(tmp_path, net, image):
    res = solver.solve(image, Identity((16, 16)), net, SolverConfig(max_iter=5))
    solver.write_history(tmp_path / "h.csv", res.state.history)
    with open(tmp_path / "h.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iter", "data_term", "penalty", "total", "step"]
    assert len(rows) == 1 + len(res.state.history)
    assert float(rows[-1][3]) == res.state.history[-1].total


def test_noise_probe(net, image):
    A = Mask.random((16, 16), 0.5, 0)
    rows = solver.noise_stability_probe(A.apply(image), A, net, SolverConfig(max_iter=20), (0.0, 0.05, 0.2), draws=2)
    assert [r.delta for r in rows] == [0.0, 0.05, 0.2]
    assert rows[0].mean_drift == 0.0
    assert all(r.mean_drift > 0 for r in rows[1:])
