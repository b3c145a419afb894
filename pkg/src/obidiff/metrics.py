"""Image measurement machinery: pair metrics, Frechet proxy, feature stats.

All metrics operate on [0, 1] grayscale arrays. PSNR uses MAX = 1.0 on the
normalized scale and returns math.inf for identical images. SSIM is the mean
of local SSIM over valid (un-padded) Gaussian windows; the window is 11x11
shrunk to fit small images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, signal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class PairMetrics:
    l1: float
    rmse: float
    psnr: float
    ssim: float


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_window_size(shape: tuple[int, int]) -> int:
    """11, shrunk (and forced odd) to fit the smaller image side."""
    size = min(SSIM_WINDOW, shape[0], shape[1])
    if size % 2 == 0:
        size -= 1
    return size


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over valid Gaussian windows on the [0, 1] range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    size = ssim_window_size(a.shape)
    win = _gaussian_window(size, SSIM_SIGMA)

    def filt(x):
        return signal.correlate2d(x, win, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = filt(a * a)
    mu_bb = filt(b * b)
    mu_ab = filt(a * b)
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def pair_metrics(a: np.ndarray, b: np.ndarray) -> PairMetrics:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    # fsum keeps the reductions exactly rounded, independent of traversal
    # order, so these values agree bit-for-bit with a naive reference loop.
    l1 = math.fsum(np.abs(diff).ravel()) / diff.size
    mse = math.fsum((diff * diff).ravel()) / diff.size
    rmse = math.sqrt(mse)
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
    return PairMetrics(l1=l1, rmse=rmse, psnr=psnr, ssim=ssim(a, b))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). Falls back to
    diagonal covariances when either set is too small (< 2x feature dim)
    for a stable full covariance estimate.
    """
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[0] == 0 or feats_b.shape[0] == 0:
        raise ValueError("feature sets must be non-empty")
    dim = feats_a.shape[1]
    mu_a = feats_a.mean(axis=0)
    mu_b = feats_b.mean(axis=0)
    shift = float(np.sum((mu_a - mu_b) ** 2))
    if min(feats_a.shape[0], feats_b.shape[0]) < 2 * dim:
        va = feats_a.var(axis=0)
        vb = feats_b.var(axis=0)
        trace = float(np.sum(va + vb - 2.0 * np.sqrt(va * vb)))
        return shift + max(trace, 0.0)
    cov_a = np.cov(feats_a, rowvar=False)
    cov_b = np.cov(feats_b, rowvar=False)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    trace = float(np.trace(cov_a + cov_b - 2.0 * covmean))
    return shift + max(trace, 0.0)


def fid_proxy(images_a, images_b, extractor) -> float:
    """Frechet distance on extractor features of two image sets.

    `extractor` maps a list of images to an (n, d) feature matrix; the
    recognition classifier's penultimate layer is the intended extractor.
    """
    images_a = list(images_a)
    images_b = list(images_b)
    if not images_a or not images_b:
        raise ValueError("image sets must be non-empty")
    return frechet_distance(extractor(images_a), extractor(images_b))


@dataclass(frozen=True)
class FeatureStats:
    brightness: float
    contrast: float
    sharpness: float
    si: float


def feature_stats(img: np.ndarray) -> FeatureStats:
    """Low-level features: mean, std, Laplacian variance, Sobel-magnitude std.

    The 3x3 operators are applied in 'valid' mode (no boundary padding).
    """
    img = np.asarray(img, dtype=np.float64)
    lap = signal.correlate2d(img, LAPLACIAN_KERNEL, mode="valid")
    gx = signal.correlate2d(img, SOBEL_X, mode="valid")
    gy = signal.correlate2d(img, SOBEL_Y, mode="valid")
    mag = np.sqrt(gx**2 + gy**2)
    return FeatureStats(
        brightness=float(img.mean()),
        contrast=float(img.std()),
        sharpness=float(lap.var()),
        si=float(mag.std()),
    )


def acc_at_k(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the top-k logits.

    Ties are broken by ascending class index, so the metric is deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_classes = logits.shape[1]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must be in [1, {n_classes}], got {k}")
    # stable sort on -logit keeps lower class indices first among ties
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())
