import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from app.core.diffusion import ProxyClassifier
from app.core.metrics import (
    PSNR_CAP,
    SSIM_C1,
    SSIM_C2,
    lpips_from_features,
    lpips_proxy,
    mean_std,
    param_count,
    psnr,
    psnr_from_mse,
    ssim,
    ssim_window,
    to_pixel_range,
    tv,
)
from app.core.policy import ClassicalActor, HybridActor
from app.models import ClassifierConfig, VqcConfig

images = arrays(np.float64, (16, 16), elements=st.floats(-1.0, 1.0))


def test_psnr_identical_is_capped(rng):
    x = rng.uniform(-1, 1, size=(16, 16))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_examples():
    assert psnr(np.full((4, 4), -1.0), np.full((4, 4), 1.0)) == pytest.approx(0.0, abs=1e-12)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.2)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_is_monotone_in_mse():
    assert psnr_from_mse(1.0) > psnr_from_mse(2.0) > psnr_from_mse(50.0)
    assert psnr_from_mse(1e-30) == PSNR_CAP


def test_ssim_identical_is_one(rng):
    x = rng.uniform(-1, 1, size=(16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    a, b = np.full((8, 8), 0.0), np.full((8, 8), 0.5)
    pa, pb = to_pixel_range(a)[0, 0], to_pixel_range(b)[0, 0]
    expected = (2 * pa * pb + SSIM_C1) / (pa * pa + pb * pb + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_window_by_window_average(rng):
    for _ in range(10):
        x = rng.uniform(-1, 1, size=(16, 16))
        y = np.clip(x + rng.normal(scale=0.3, size=(16, 16)), -1, 1)
        px, py = to_pixel_range(x), to_pixel_range(y)
        brute = np.mean([
            ssim_window(px[i:i + 8, j:j + 8], py[i:i + 8, j:j + 8]) for i in range(9) for j in range(9)
        ])
        assert ssim(x, y) == pytest.approx(brute, abs=1e-10)


def test_ssim_rejects_small_or_flat_input():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ssim(np.zeros(256), np.zeros(256))


@given(x=images, y=images)
def test_ssim_is_symmetric_and_bounded(x, y):
    s = ssim(x, y)
    assert s == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_tv_examples():
    assert tv(np.full((16, 16), 0.3)) == 0.0
    assert tv(np.array([[1.0, -1.0], [-1.0, 1.0]])) == pytest.approx(2.0)
    ramp = np.tile(np.linspace(0.0, 1.0, 4), (4, 1))
    assert tv(ramp) == pytest.approx(4 * 1.0 / 16)
    assert tv(ramp.ravel()) == tv(ramp)
    with pytest.raises(ValueError):
        tv(np.zeros(10))


@pytest.fixture(scope="module")
def classifier():
    return ProxyClassifier.create(ClassifierConfig(hidden=16), np.random.default_rng(5))


def test_lpips_is_a_pseudo_metric(classifier, rng):
    x = rng.uniform(-1, 1, size=(16, 16))
    y = rng.uniform(-1, 1, size=(16, 16))
    assert lpips_proxy(x, x, classifier) == 0.0
    d = lpips_proxy(x, y, classifier)
    assert d > 0.0
    assert d == pytest.approx(lpips_proxy(y, x, classifier), abs=1e-12)


def test_lpips_ignores_feature_scale():
    a = [np.array([1.0, 0.0]), np.array([3.0, 4.0])]
    assert lpips_from_features(a, [2 * f for f in a]) == pytest.approx(0.0, abs=1e-12)
    assert lpips_from_features([np.array([1.0, 0.0])], [np.array([0.0, 1.0])]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        lpips_from_features(a, a[:1])


def test_param_count():
    rng = np.random.default_rng(0)
    assert param_count(ClassicalActor.create([32, 32], rng)) == 1346
    assert param_count(HybridActor.create(VqcConfig(), 8, rng)) == 82
    assert param_count(ProxyClassifier.create(ClassifierConfig(hidden=64), rng)) == 256 * 64 + 64 + 64 * 4 + 4


def test_mean_std():
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)
    mean, std = mean_std([])
    assert np.isnan(mean) and np.isnan(std)
