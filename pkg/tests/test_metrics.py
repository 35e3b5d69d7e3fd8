import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from synthnett import metrics, phantoms
from synthnett.metrics import MetricReport

unit = st.floats(0.0, 1.0, allow_nan=False)


def _skimage_ssim(x, y):
    return structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)


def test_id_examples():
    x = np.array([0.0, 0.1, 0.2])
    assert metrics.id_metric(x, x) == 1.0
    assert metrics.id_metric(x, x + 0.5) == 0.0
    # 0.0039 < 1/256 = 0.00390625, so this entry still counts as equal
    assert metrics.id_metric(x, np.array([0.0, 0.1039, 0.2])) == 1.0
    assert metrics.id_metric(x, np.array([0.0, 0.104, 0.2])) == pytest.approx(2 / 3)


def test_id_closed_interval():
    assert metrics.id_metric(np.array([0.0]), np.array([0.5]), eps=0.5) == 1.0


def test_id_errors():
    with pytest.raises(ValueError):
        metrics.id_metric(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        metrics.id_metric(np.zeros(3), np.zeros(3), eps=0.0)


@given(arrays(np.float64, 12, elements=unit), arrays(np.float64, 12, elements=unit), st.floats(1e-3, 0.5))
def test_id_brute_force(x, y, eps):
    count = 0
    for a, b in zip(x, y):
        if abs(a - b) <= eps:
            count += 1
    assert metrics.id_metric(x, y, eps) == count / len(x)


@given(arrays(np.float64, 16, elements=unit), arrays(np.float64, 16, elements=unit), st.randoms(use_true_random=False))
def test_id_permutation_invariant(x, y, r):
    perm = list(range(16))
    r.shuffle(perm)
    assert metrics.id_metric(x, y) == metrics.id_metric(x[perm], y[perm])


def test_psnr_examples(rng):
    x = rng.uniform(0, 1, (8, 8))
    assert metrics.psnr(x, x) == math.inf
    assert metrics.psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)
    y = rng.uniform(0, 1, (8, 8))
    mse = sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / 64
    assert metrics.psnr(x, y) == pytest.approx(10 * math.log10(1 / mse), abs=1e-12)
    assert metrics.psnr(x, y) == pytest.approx(peak_signal_noise_ratio(x, y, data_range=1.0), abs=1e-12)
    with pytest.raises(ValueError):
        metrics.psnr(x, y, peak=0)


@given(arrays(np.float64, (4, 4), elements=unit), arrays(np.float64, (4, 4), elements=unit), st.floats(-1, 1))
def test_psnr_depends_on_difference(x, y, shift):
    d = x - y
    a = metrics.psnr(x, y)
    b = metrics.psnr(x + shift, x + shift - d)
    assert a == b or math.isclose(a, b, rel_tol=1e-9)


def test_ssim_matches_skimage(rng):
    for _ in range(3):
        x = rng.uniform(0, 1, (32, 40))
        y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
        assert metrics.ssim(x, y) == pytest.approx(_skimage_ssim(x, y), abs=1e-10)
    p = phantoms.generate(phantoms.random_spec(64, 0))
    q = np.clip(p + 0.05 * rng.standard_normal(p.shape), 0, 1)
    assert metrics.ssim(p, q) == pytest.approx(_skimage_ssim(p, q), abs=1e-10)


def test_ssim_examples(rng):
    x = (rng.uniform(0, 1, (24, 24)) > 0.5).astype(float)
    y = rng.uniform(0, 1, (24, 24))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-15)
    assert metrics.ssim(x, 1 - x) < 0
    assert abs(metrics.ssim(x, y) - metrics.ssim(y, x)) < 1e-12


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((10, 30)), np.zeros((10, 30)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros(30), np.zeros(30))


def test_window_normalized():
    w = metrics.gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)


def test_noise_ladder_degrades():
    x = phantoms.generate(phantoms.random_spec(48, 5))
    noise = np.random.default_rng(0).standard_normal(x.shape)
    reps = [metrics.report(x, x + a * noise) for a in (0.0, 0.01, 0.03, 0.1, 0.3)]
    assert reps[0] == MetricReport(pytest.approx(1.0), math.inf, 1.0)
    for a, b in zip(reps, reps[1:]):
        assert b.ssim < a.ssim and b.psnr < a.psnr and b.id < a.id


def test_report_clamps():
    x = np.full((16, 16), 0.5)
    r = metrics.report(x, x + 10.0)
    assert r.psnr == pytest.approx(10 * math.log10(1 / 0.25))
    assert 0.0 <= r.id <= 1.0 and r.ssim <= 1.0


def test_default_grid():
    assert metrics.DEFAULT_P_GRID == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_ratio_curve_identity():
    ref = [MetricReport(0.9, 30.0, 0.8), MetricReport(0.7, 25.0, 0.6)]
    (row,) = metrics.ratio_curve(ref, {0.0: ref})
    assert (row.id_ratio, row.ssim_ratio, row.psnr_ratio, row.n_images) == (1.0, 1.0, 1.0, 2)


def test_ratio_curve_means_and_missing():
    ref = [MetricReport(0.5, math.inf, 0.0), MetricReport(0.8, 20.0, 0.5)]
    thr = {0.5: [MetricReport(0.25, 10.0, 0.3), MetricReport(0.4, 10.0, 0.25)]}
    (row,) = metrics.ratio_curve(ref, thr)
    assert row.ssim_ratio == pytest.approx(0.5)
    assert row.psnr_ratio == pytest.approx(0.5)  # infinite reference dropped
    assert row.id_ratio == pytest.approx(0.5)  # zero reference dropped
    (row,) = metrics.ratio_curve(ref[:1], {0.5: thr[0.5][:1]})
    assert math.isnan(row.id_ratio) and math.isnan(row.psnr_ratio)


def test_ratio_curve_alignment():
    ref = [MetricReport(0.5, 1.0, 0.5)]
    with pytest.raises(ValueError):
        metrics.ratio_curve(ref, {0.5: ref * 2})


def test_ratio_row_csv():
    r = metrics.RatioRow(0.85, 0.5, 0.25, 1.0, 3)
    assert r.csv_row() == ["0.85", "0.5", "0.25", "1.0", "3"]
