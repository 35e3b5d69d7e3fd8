import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthnett import metrics, phantoms, tfunet
from synthnett import sparse_approx as sa
from synthnett.sparse_approx import ThresholdPlan

coeffs = arrays(np.float64, (3, 10), elements=st.integers(-4, 4).map(float))
fractions = st.floats(0.0, 1.0)


def test_channel_examples():
    np.testing.assert_array_equal(sa.zero_smallest(np.array([[0.1, -0.5, 0.2, 0.9]]), 0.5), [[0, -0.5, 0, 0.9]])
    np.testing.assert_array_equal(sa.zero_smallest(np.array([[0.3, -0.3, 0.7, 0.9]]), 0.25), [[0, -0.3, 0.7, 0.9]])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(sa.zero_smallest(x, 0.0), x)
    np.testing.assert_array_equal(sa.zero_smallest(x, 1.0), np.zeros_like(x))


def test_plan_validation():
    with pytest.raises(ValueError):
        ThresholdPlan(1.5)
    with pytest.raises(ValueError):
        ThresholdPlan(-0.1)
    plan = ThresholdPlan(0.5, coarse=False)
    assert plan.includes("level1.h") and plan.includes("bypass2") and not plan.includes("coarse")


@given(arrays(np.float64, (2, 3, 4, 5), elements=st.floats(0.01, 10)).map(lambda a: a * np.sign(np.arange(120).reshape(2, 3, 4, 5) % 2 - 0.5)), fractions)
def test_exact_zero_count_and_no_growth(arr, p):
    out = sa.threshold_array(arr, p)
    k = int(np.floor(p * 20))
    zeros = (out == 0).reshape(6, 20).sum(axis=1)
    assert np.all(zeros == k)
    assert np.all(np.abs(out) <= np.abs(arr))
    kept = out != 0
    np.testing.assert_array_equal(out[kept], arr[kept])


@given(coeffs, fractions, fractions)
def test_nested_supports(x, p1, p2):
    lo, hi = sorted((p1, p2))
    once = sa.zero_smallest(x, hi)
    np.testing.assert_array_equal(sa.zero_smallest(sa.zero_smallest(x, lo), hi), once)
    assert np.all((once != 0) <= (sa.zero_smallest(x, lo) != 0))


@given(coeffs, fractions)
def test_kept_entries_dominate(x, p):
    out = sa.zero_smallest(x, p)
    for row_in, row_out in zip(x, out):
        removed = np.abs(row_in[row_out == 0])
        kept = np.abs(row_in[row_out != 0])
        if removed.size and kept.size:
            assert removed.max() <= kept.min()


def test_threshold_scope(small_params, rng):
    xi = tfunet.encode(small_params, rng.uniform(0, 1, (16, 16)))
    out = sa.threshold_fraction(xi, ThresholdPlan(1.0, coarse=False, bypass=False))
    assert all(np.all(t.data == 0) for t in out.high_only())
    np.testing.assert_array_equal(out.coarse.data, xi.coarse.data)
    for a, b in zip(out.bypass, xi.bypass):
        np.testing.assert_array_equal(a.data, b.data)
    full = sa.threshold_fraction(xi, 1.0)
    assert np.all(full.flatten() == 0)


def test_p_zero_bit_exact(small_params, rng):
    x = rng.uniform(0, 1, (16, 16))
    r = sa.sparse_reconstruct(small_params, x, 0.0)
    np.testing.assert_array_equal(r.full, r.thresholded)
    assert r.report_full == r.report_thresholded
    xi = tfunet.encode(small_params.frozen(), x)
    np.testing.assert_array_equal(sa.threshold_fraction(xi, 0.0).flatten(), xi.flatten())


def test_sparse_reconstruct_matches_manual(small_params, rng):
    x = rng.uniform(0, 1, (16, 16))
    r = sa.sparse_reconstruct(small_params, x, 0.6)
    p = small_params.frozen()
    xi = tfunet.encode(p, x)
    np.testing.assert_array_equal(r.full, tfunet.decode(p, xi).data[0, 0])
    np.testing.assert_array_equal(r.thresholded, tfunet.decode(p, sa.threshold_fraction(xi, 0.6)).data[0, 0])


def test_ratio_experiment_batches_consistently(small_params):
    imgs = phantoms.generate_dataset(5, 16, 7)
    a = sa.ratio_experiment(small_params, imgs, (0.5, 0.9), batch_size=2)
    b = sa.ratio_experiment(small_params, imgs, (0.5, 0.9), batch_size=16)
    for ra, rb in zip(a.rows, b.rows):
        np.testing.assert_allclose(
            [ra.id_ratio, ra.ssim_ratio, ra.psnr_ratio], [rb.id_ratio, rb.ssim_ratio, rb.psnr_ratio], rtol=1e-12
        )
    assert len(a.rows) == 2 and all(r.n_images == 5 for r in a.rows)
    assert a.reference[3] == sa.sparse_reconstruct(small_params, imgs[3], 0.5).report_full


def test_run_experiment_and_csv(tmp_path, small_params, small_params_nobypass):
    imgs = phantoms.generate_dataset(3, 16, 7)
    res = sa.run_experiment(small_params, small_params_nobypass, imgs)
    for name, cr in res.items():
        sa.write_ratio_csv(tmp_path / f"{name}.csv", cr.rows)
        with open(tmp_path / f"{name}.csv") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == metrics.RATIO_HEADER
        assert len(rows) == 1 + len(metrics.DEFAULT_P_GRID)
    sa.write_detail_csv(tmp_path / "detail.csv", res["bypass"])
    with open(tmp_path / "detail.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["image", "p", "id", "ssim", "psnr"]
    assert len(rows) == 1 + 3 * (1 + len(metrics.DEFAULT_P_GRID))
    with pytest.raises(ValueError):
        sa.run_experiment(small_params_nobypass, small_params, imgs)


def test_bypass_zeroing_reports(small_params):
    imgs = phantoms.generate_dataset(2, 16, 8)
    full, zeroed = sa.bypass_zeroing(small_params, imgs)
    assert len(full) == len(zeroed) == 2
    assert full[0] == sa.sparse_reconstruct(small_params, imgs[0], 0.0).report_full
