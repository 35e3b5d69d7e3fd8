import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthnett import haar
from synthnett import tensor as T
from synthnett.tensor import Tape, Tensor


def _sub(x):
    return [t.data for t in haar.analysis(Tensor(x))]


def test_filters_orthonormal():
    F = np.stack([haar.FILTERS[b].ravel() for b in haar.BANDS])
    np.testing.assert_allclose(F @ F.T, np.eye(4), atol=1e-15)


def test_constant_block():
    low, h, v, d = _sub(np.ones((1, 1, 2, 2)))
    assert low.item() == pytest.approx(2.0, abs=1e-15)
    assert h.item() == v.item() == d.item() == 0.0


def test_column_alternation_lands_in_v():
    x = np.array([[1.0, -1.0], [1.0, -1.0]])
    low, h, v, d = _sub(x[None, None])
    # direct inner products with each filter
    for band, val in zip(haar.BANDS, (low, h, v, d)):
        assert val.item() == pytest.approx(np.sum(haar.FILTERS[band] * x), abs=1e-15)
    assert v.item() == pytest.approx(2.0)
    assert low.item() == h.item() == d.item() == 0.0


def test_analysis_matches_block_products(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    subs = _sub(x)
    for band, s in zip(haar.BANDS, subs):
        f = haar.FILTERS[band]
        ref = np.einsum("bcipjq,pq->bcij", x.reshape(2, 3, 3, 2, 4, 2), f)
        np.testing.assert_allclose(s, ref, atol=1e-14)


def test_parseval(rng):
    x = rng.standard_normal((3, 2, 16, 16))
    e = sum(np.sum(s**2) for s in _sub(x))
    assert abs(e - np.sum(x**2)) / np.sum(x**2) < 1e-12


def test_perfect_reconstruction(rng):
    x = rng.standard_normal((20, 1, 32, 32))
    y = haar.synthesis(*haar.analysis(Tensor(x))).data
    assert np.abs(y - x).max() < 1e-12


def test_single_low_atom():
    low = np.zeros((1, 1, 2, 2))
    low[0, 0, 1, 0] = 1.0
    z = np.zeros_like(low)
    out = haar.synthesis(Tensor(low), Tensor(z), Tensor(z), Tensor(z)).data[0, 0]
    ref = np.zeros((4, 4))
    ref[2:4, 0:2] = 0.5
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_synthesis_is_adjoint(rng):
    x = rng.standard_normal((2, 2, 8, 8))
    Y = [rng.standard_normal((2, 2, 4, 4)) for _ in range(4)]
    lhs = sum(np.vdot(a, b) for a, b in zip(_sub(x), Y))
    rhs = np.vdot(x, haar.synthesis(*map(Tensor, Y)).data)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_synthesis_bands_sum_to_synthesis(rng):
    Y = [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(4)]
    sep = haar.synthesis_bands(*Y).data.reshape(2, 3, 4, 8, 8)
    np.testing.assert_allclose(sep.sum(axis=2), haar.synthesis(*Y).data, atol=1e-14)
    # band j of channel c only depends on band j
    zeros = [Tensor(np.zeros((2, 3, 4, 4)))] * 4
    for j in range(4):
        only = list(zeros)
        only[j] = Y[j]
        s = haar.synthesis_bands(*only).data.reshape(2, 3, 4, 8, 8)
        assert np.abs(np.delete(s, j, axis=2)).max() == 0.0


def test_channel_independence(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    x[:, 1] = 0.0
    for s in _sub(x):
        assert np.abs(s[:, 1]).max() == 0.0
        assert np.abs(s[:, 0]).max() > 0.0


def test_odd_size_rejected():
    with pytest.raises(ValueError):
        haar.analysis(Tensor(np.zeros((1, 1, 5, 4))))
    with pytest.raises(ValueError):
        haar.frame_check(1, (6, 7))


def test_subband_shape_mismatch_rejected():
    a = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        haar.synthesis(a, a, a, Tensor(np.zeros((1, 1, 2, 3))))


def test_gradient_flows_through_fixed_legs(rng):
    x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.l2_norm_squared(haar.analysis(x)[1])
    g = tape.backward(loss)[x]
    # d/dx ||h||^2 = 2 * H_h h
    h = haar.analysis(x.detach())[1].data
    z = np.zeros_like(h)
    ref = 2 * haar.synthesis(Tensor(z), Tensor(h), Tensor(z), Tensor(z)).data
    np.testing.assert_allclose(g, ref, atol=1e-13)


def test_frame_check_report():
    rep = haar.frame_check(10, (64, 64), seed=0)
    assert abs(rep.c_estimate - 1.0) < 1e-12
    assert rep.max_deviation < 1e-12
    assert rep.to_json() == haar.frame_check(10, (64, 64), seed=0).to_json()


def test_frame_operator_on_basis_vectors():
    for i, j in itertools.product(range(2), range(2)):
        e = np.zeros((1, 1, 2, 2))
        e[0, 0, i, j] = 1.0
        np.testing.assert_allclose(haar.frame_operator(Tensor(e)).data, e, atol=1e-15)


@given(arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-1e6, 1e6)))
def test_frame_identity_property(x):
    y = haar.frame_operator(Tensor(x)).data
    assert np.abs(y - x).max() <= 1e-12 * max(1.0, np.abs(x).max())
