"""Image-quality metrics and parameter accounting.

Images live in [-1, 1]; PSNR and SSIM first map them to [0, 255].
"""

import math
from typing import List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEAK = 255.0
PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2
FEATURE_EPS = 1e-12


def to_pixel_range(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * (PEAK / 2.0)


def _check_pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK * PEAK / mse))


def psnr(x, x_hat) -> float:
    x, x_hat = _check_pair(x, x_hat)
    mse = float(np.mean((to_pixel_range(x) - to_pixel_range(x_hat)) ** 2))
    return psnr_from_mse(mse)


def ssim_window(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM of one window of [0, 255] pixels, population statistics."""
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b, cov = (da * da).mean(), (db * db).mean(), (da * db).mean()
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(num / den)


def ssim(x, x_hat, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every window x window patch (stride 1) of two 2-D images."""
    x, x_hat = _check_pair(x, x_hat)
    if x.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {x.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} SSIM window")

    a = sliding_window_view(to_pixel_range(x), (window, window))
    b = sliding_window_view(to_pixel_range(x_hat), (window, window))
    axes = (-2, -1)
    mu_a = a.mean(axis=axes, keepdims=True)
    mu_b = b.mean(axis=axes, keepdims=True)
    da, db = a - mu_a, b - mu_b
    var_a = (da * da).mean(axis=axes)
    var_b = (db * db).mean(axis=axes)
    cov = (da * db).mean(axis=axes)
    mu_a, mu_b = mu_a[..., 0, 0], mu_b[..., 0, 0]

    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def tv(x) -> float:
    """Anisotropic total variation (sum of absolute forward differences) per pixel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        side = math.isqrt(x.size)
        if side * side != x.size:
            raise ValueError(f"cannot reshape {x.size} values into a square image")
        x = x.reshape(side, side)
    total = np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum()
    return float(total / x.size)


def unit_normalize(features: np.ndarray) -> np.ndarray:
    return features / (np.linalg.norm(features) + FEATURE_EPS)


def lpips_from_features(feats_a: List[np.ndarray], feats_b: List[np.ndarray]) -> float:
    """Sum over layers of the squared distance between unit-normalized activations."""
    if len(feats_a) != len(feats_b):
        raise ValueError(f"feature stacks differ in depth: {len(feats_a)} vs {len(feats_b)}")
    total = 0.0
    for a, b in zip(feats_a, feats_b):
        diff = unit_normalize(a) - unit_normalize(b)
        total += float(np.sum(diff * diff))
    return total


def lpips_proxy(x, x_hat, clf) -> float:
    """Perceptual distance computed on the frozen proxy classifier's hidden activations."""
    x, x_hat = _check_pair(x, x_hat)
    return lpips_from_features(clf.hidden_activations(x), clf.hidden_activations(x_hat))


def param_count(model) -> int:
    """Total trainable scalars of any model exposing ``param_count`` or ``parameters``."""
    if hasattr(model, "param_count"):
        return int(model.param_count())
    return int(sum(np.asarray(p).size for p in model.parameters().values()))


def mean_std(values) -> tuple:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())
