import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdif.evalkit import (
    PSNR_CAP,
    ROI,
    UndefinedMetricError,
    cnr,
    drift_curve,
    evaluate_pairs,
    profile,
    psnr,
    read_rois,
    residual_map,
    rmse,
    ssim,
)
from cdif.phantom_sim import generate_phantom
from cdif.schedule import make_schedule


def test_identical_images():
    a = generate_phantom(64, 4, 0).image
    assert rmse(a, a) == 0.0
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_constant_offset_case():
    a = np.full((32, 32), -200.0)
    a[10:20, 10:20] = 300.0
    b = a + 100.0
    assert rmse(a, b) == pytest.approx(100.0, abs=1e-12)
    assert psnr(a, b) == pytest.approx(26.02, abs=0.01)
    assert psnr(a, b) == pytest.approx(20 * math.log10(2000 / 100), abs=1e-12)


def test_window_clipping_applies_to_both():
    a = np.full((16, 16), 1500.0)
    b = np.full((16, 16), 1200.0)
    assert rmse(a, b) == 0.0
    assert rmse(a, b, window=(-1000, 2000)) == pytest.approx(300.0)
    with pytest.raises(ValueError):
        rmse(a, b, window=(10, 10))
    with pytest.raises(ValueError):
        psnr(a, b[:8])


def test_ssim_matches_hand_formula_for_constants():
    # constant images: contrast/structure term is 1, leaving the luminance term
    a, b = np.full((32, 32), 0.0), np.full((32, 32), 100.0)
    c1 = (0.01 * 2000) ** 2
    assert ssim(a, b) == pytest.approx(c1 / (100.0**2 + c1), rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(-1200, 1200)),
       arrays(np.float64, (16, 16), elements=st.floats(-1200, 1200)))
def test_metric_invariants(a, b):
    assert rmse(a, b) >= 0
    assert -1.0 <= ssim(a, b) <= 1.0
    assert rmse(a, b) == pytest.approx(rmse(b, a))
    for flip in (np.fliplr, np.flipud):
        assert rmse(flip(a), flip(b)) == pytest.approx(rmse(a, b), rel=1e-12, abs=1e-12)
        assert psnr(flip(a), flip(b)) == pytest.approx(psnr(a, b), rel=1e-12)
        assert ssim(flip(a), flip(b)) == pytest.approx(ssim(a, b), rel=1e-9, abs=1e-12)


def cnr_image():
    img = np.zeros((8, 8))
    img[:4, :4] = 100.0
    img[4:, :] = np.tile([25.0, 75.0], 16).reshape(4, 8)  # mean 50, population sd 25
    return img, ROI(0, 0, 4, 4, "signal"), ROI(0, 4, 8, 4, "background")


def test_cnr_examples():
    img, sig, bg = cnr_image()
    assert cnr(img, sig, bg) == 2.0
    assert cnr(img, bg, bg) == 0.0
    assert cnr(3.0 * img, sig, bg) == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(UndefinedMetricError):
        cnr(np.ones((8, 8)), sig, ROI(0, 4, 8, 4, "background"))


def test_roi_validation(tmp_path):
    with pytest.raises(ValueError):
        ROI(0, 0, 1, 3)
    with pytest.raises(ValueError):
        ROI(0, 0, 2, 2, "lesion")
    with pytest.raises(ValueError):
        ROI(6, 6, 4, 4).crop(np.zeros((8, 8)))
    (tmp_path / "r.txt").write_text("# comment\nsignal 1 2 3 4\n\nbackground 0 0 5 5  # trailing\n")
    assert read_rois(tmp_path / "r.txt") == [ROI(1, 2, 3, 4, "signal"), ROI(0, 0, 5, 5, "background")]


def test_profile_and_residual():
    img = np.full((10, 10), 7.0)
    assert profile(img, (0, 0), (9, 9)).tolist() == [7.0] * 10
    ramp = np.tile(np.arange(10.0), (10, 1))
    assert profile(ramp, (4, 0), (4, 9)).tolist() == list(range(10))
    with pytest.raises(ValueError):
        profile(img, (0, 0), (10, 0))
    a = np.random.default_rng(0).normal(size=(5, 5))
    assert not residual_map(a, a).any()
    np.testing.assert_array_equal(residual_map(a, np.zeros_like(a)), a)


def test_drift_curves():
    s = make_schedule(10)
    mp, cl = drift_curve(s, 100.0, 20.0, 10_000, seed=0)
    assert mp.shape == cl.shape == (11,)
    assert np.all(np.abs(mp - 100.0) <= 1.5)
    assert np.all(np.abs(cl - 100.0 * np.sqrt(s.alphas)) <= 1.5)
    assert cl[-1] == pytest.approx(0.0, abs=1.5)


def test_report_summary():
    a = generate_phantom(32, 3, 1).image
    rng = np.random.default_rng(1)
    pairs = [(f"s{k}", a + rng.normal(0, 10 * (k + 1), a.shape), a) for k in range(3)]
    rep = evaluate_pairs(pairs)
    assert rep.names == ["s0", "s1", "s2"]
    mean, sd = rep.summary()["psnr_db"]
    assert mean == pytest.approx(np.mean(rep.psnr_db)) and sd == pytest.approx(np.std(rep.psnr_db))
    assert rep.psnr_db[0] > rep.psnr_db[1] > rep.psnr_db[2]
