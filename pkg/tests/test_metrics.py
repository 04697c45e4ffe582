import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.ndimage import gaussian_filter

from spiralforge import metrics
from spiralforge.errors import ImageSmallerThanWindow, ShapeMismatch, ZeroReference, ZeroReferenceEnergy

from oracles import ssim_oracle


def test_ssim_matches_brute_force(rng):
    x, y = rng.random((2, 16, 16))
    assert abs(metrics.ssim(x, y) - ssim_oracle(x, y)) < 1e-9
    y2 = np.clip(x + 0.1 * rng.standard_normal((16, 16)), 0, 1)
    assert abs(metrics.ssim(y2, x) - ssim_oracle(y2, x)) < 1e-9


def test_ssim_identity_symmetry_and_range(rng):
    x, y = rng.random((2, 24, 24))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(metrics.ssim(x, y) - metrics.ssim(y, x)) < 1e-12
    assert -1 <= metrics.ssim(x, 1 - x) <= 1
    with pytest.raises(ImageSmallerThanWindow):
        metrics.ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ShapeMismatch):
        metrics.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ssim_batched(rng):
    x, y = rng.random((2, 3, 16, 16))
    out = metrics.ssim(x, y)
    assert out.shape == (3,)
    assert out[1] == pytest.approx(metrics.ssim(x[1], y[1]), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10.0))
def test_ssim_scale_consistency(a):
    rng = np.random.default_rng(7)
    x, y = rng.random((2, 16, 16))
    assert metrics.ssim(a * x, a * y, data_range=a) == pytest.approx(metrics.ssim(x, y), abs=1e-9)


def test_nrmse(rng):
    x, ref = rng.random((2, 9, 7))
    naive = math.sqrt(sum((a - b) ** 2 for a, b in zip(x.ravel(), ref.ravel())) / sum(b * b for b in ref.ravel()))
    assert abs(metrics.nrmse(x, ref) - naive) < 1e-12
    assert metrics.nrmse(ref, ref) == 0.0
    assert metrics.nrmse(2 * ref, ref) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ZeroReference):
        metrics.nrmse(x, np.zeros_like(x))


def test_psnr(rng):
    ref = rng.random((8, 8))
    ref[0, 0] = 1.0
    assert metrics.psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)
    assert metrics.psnr(ref, ref) == math.inf
    x = rng.random((8, 8))
    mse = sum((a - b) ** 2 for a, b in zip(x.ravel(), ref.ravel())) / 64
    assert abs(metrics.psnr(x, ref) - 10 * math.log10(1.0 / mse)) < 1e-9
    assert metrics.psnr(x, ref, peak=2.0) == pytest.approx(metrics.psnr(x, ref) + 20 * math.log10(2), abs=1e-9)


def test_laplacian_energy_hand_example():
    img = np.zeros((4, 4))
    img[1, 1] = 1.0
    # stencil response: -4 at the impulse, +1 at its four neighbours (borders reflect)
    assert metrics.laplacian_energy(img) == pytest.approx((16 + 4) / 16, abs=1e-12)
    assert metrics.lape(img, 2 * img) == pytest.approx(0.25, abs=1e-12)
    corner = np.zeros((4, 4))
    corner[0, 0] = 1.0
    # reflected neighbours of the corner pixel equal itself: response -2 there, +1 at two neighbours
    assert metrics.laplacian_energy(corner) == pytest.approx((4 + 1 + 1) / 16, abs=1e-12)


def test_lape_blur_and_errors(rng):
    ref = rng.random((32, 32))
    assert metrics.lape(ref, ref) == pytest.approx(1.0)
    assert metrics.lape(gaussian_filter(ref, 1.0), ref) < 1.0
    with pytest.raises(ZeroReferenceEnergy):
        metrics.lape(ref, np.ones_like(ref))


def test_evaluate_aggregate_matches_two_pass_oracle(rng):
    truth = rng.random((3, 10, 16, 16))
    recon = np.clip(truth + 0.05 * rng.standard_normal(truth.shape), 0, 1)
    rep = metrics.evaluate(recon, truth, series_ids=[4, 9, 2])
    assert len(rep.rows) == 15 and [r["frame"] for r in rep.rows[:5]] == [5, 6, 7, 8, 9]
    agg = rep.aggregate()
    for name in metrics.METRIC_NAMES:
        per = [np.mean([metrics.frame_metrics(recon[n, f - 1], truth[n, f - 1])[name] for f in range(5, 10)])
               for n in range(3)]
        mean = sum(per) / 3
        std = math.sqrt(sum((p - mean) ** 2 for p in per) / 3)
        assert abs(agg[name]["mean"] - mean) < 1e-12
        assert abs(agg[name]["std"] - std) < 1e-12
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == ["series_id", "frame", "nrmse", "psnr_db", "ssim", "lape_ratio"]
    assert rows[5]["series_id"] == "9"
    assert json.loads(rep.to_json())["n_series"] == 3


def test_evaluate_sliding_window_offset(rng):
    truth = rng.random((1, 10, 16, 16))
    recon = truth[:, 4:]
    agg = metrics.evaluate(recon, truth, recon_offset=4).aggregate()
    assert agg["ssim"]["mean"] == pytest.approx(1.0)
    assert agg["nrmse"]["mean"] == 0.0


def test_transition_curve_identity_and_drop(rng):
    gt = rng.random((12, 16, 16))
    flat = metrics.transition_curve(gt, gt)
    assert flat.frames == list(range(5, 13))
    assert np.allclose(flat.ssim, 1.0)
    assert flat.switch_frame == 6 and flat.recovery_frames == 0
    recon = gt[4:].copy()
    recon[1] = rng.random((16, 16))   # frame 6 wrong, recovered from frame 7
    curve = metrics.transition_curve(gt, recon)
    assert curve.first_post_switch < 0.5
    assert curve.post_switch_min == curve.first_post_switch
    assert curve.recovery_frames == 1
    assert curve.to_dict()["switch_frame"] == 6


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (12, 12), elements=st.floats(0, 1)), hnp.arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_metric_invariants(x, y):
    assert -1 - 1e-12 <= metrics.ssim(x, y) <= 1 + 1e-12
    if np.linalg.norm(y) > 0:
        assert metrics.nrmse(x, y) >= 0
    if metrics.laplacian_energy(y) > 0:
        assert metrics.lape(x, y) >= 0
