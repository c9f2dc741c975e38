"""Windowed image-quality metrics and plotting helpers.

Both images are clipped to the evaluation window before any metric. PSNR uses
the window width as peak value and reports ``PSNR_CAP`` for identical inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from .schedule import DiffusionSchedule, degrade_classical, degrade_mean_preserving

DEFAULT_WINDOW = (-1000.0, 1000.0)
PSNR_CAP = 99.0


class UndefinedMetricError(ValueError):
    pass


def _windowed(a, b, window):
    lo, hi = window
    if not lo < hi:
        raise ValueError(f"invalid window {window}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.clip(a, lo, hi), np.clip(b, lo, hi), hi - lo


def rmse(a, b, window=DEFAULT_WINDOW) -> float:
    a, b, _ = _windowed(a, b, window)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, window=DEFAULT_WINDOW) -> float:
    a, b, peak = _windowed(a, b, window)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def ssim(a, b, window=DEFAULT_WINDOW) -> float:
    """Gaussian-weighted SSIM (sigma 1.5, 11x11 support), K1=0.01, K2=0.03."""
    a, b, peak = _windowed(a, b, window)
    return float(structural_similarity(
        a, b, data_range=peak, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


@dataclass(frozen=True)
class ROI:
    x: int
    y: int
    w: int
    h: int
    role: str = "signal"

    def __post_init__(self):
        if self.role not in ("signal", "background"):
            raise ValueError(f"ROI role must be signal or background, got {self.role!r}")
        if self.w * self.h < 4 or self.w < 1 or self.h < 1:
            raise ValueError("ROI area must be at least 4 pixels")

    def crop(self, img):
        img = np.asarray(img, dtype=np.float64)
        H, W = img.shape
        if self.x < 0 or self.y < 0 or self.x + self.w > W or self.y + self.h > H:
            raise ValueError(f"ROI {self} outside a {H}x{W} image")
        return img[self.y:self.y + self.h, self.x:self.x + self.w]


def cnr(img, signal: ROI, background: ROI) -> float:
    s, b = signal.crop(img), background.crop(img)
    sd = float(np.std(b))
    if sd == 0.0:
        raise UndefinedMetricError("background ROI has zero standard deviation")
    return abs(float(s.mean()) - float(b.mean())) / sd


def read_rois(path) -> list[ROI]:
    """Parse ``role x y w h`` lines (``#`` comments allowed)."""
    rois = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            role, x, y, w, h = line.split()
            rois.append(ROI(int(x), int(y), int(w), int(h), role))
    return rois


def profile(img, start, end) -> np.ndarray:
    """Nearest-pixel samples along the segment from ``start`` to ``end`` ((row, col) pairs)."""
    img = np.asarray(img, dtype=np.float64)
    (r0, c0), (r1, c1) = start, end
    n = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rr = np.rint(np.linspace(r0, r1, n)).astype(int)
    cc = np.rint(np.linspace(c0, c1, n)).astype(int)
    if rr.min() < 0 or cc.min() < 0 or rr.max() >= img.shape[0] or cc.max() >= img.shape[1]:
        raise ValueError("profile leaves the image")
    return img[rr, cc]


def residual_map(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def drift_curve(s: DiffusionSchedule, x0: float = 100.0, sigma: float = 20.0, n: int = 10_000,
                seed: int = 0, shape=(1,)):
    """Empirical ``E[x_t]`` for ``t = 0..T`` under both degradation operators.

    With noise draws ``e ~ N(0, sigma^2)``, the mean-preserving operator uses
    the low-dose-like endpoint ``x0 + e`` and the classical operator its usual
    zero-mean noise endpoint ``e``; the same draws serve every ``t``.
    Returns ``(mean_preserving, classical)`` arrays of length ``T + 1``.
    """
    rng = np.random.default_rng(seed)
    x0_img = np.full((n, *shape), float(x0))
    noise = rng.normal(0.0, sigma, size=x0_img.shape)
    xT = x0_img + noise
    mp = np.array([degrade_mean_preserving(x0_img, xT, t, s).mean() for t in range(s.T + 1)])
    cl = np.array([degrade_classical(x0_img, noise, t, s).mean() for t in range(s.T + 1)])
    return mp, cl


@dataclass
class MetricReport:
    names: list[str]
    psnr_db: list[float]
    ssim: list[float]
    rmse_hu: list[float]
    window: tuple[float, float] = DEFAULT_WINDOW

    @staticmethod
    def _agg(v):
        v = np.asarray(v, dtype=np.float64)
        return float(v.mean()), float(v.std())

    def summary(self) -> dict[str, tuple[float, float]]:
        return {"psnr_db": self._agg(self.psnr_db), "ssim": self._agg(self.ssim),
                "rmse_hu": self._agg(self.rmse_hu)}


def evaluate_pairs(pairs, window=DEFAULT_WINDOW) -> MetricReport:
    """``pairs``: iterable of ``(name, prediction, ground_truth)``."""
    rep = MetricReport([], [], [], [], tuple(window))
    for name, pred, gt in pairs:
        rep.names.append(name)
        rep.psnr_db.append(psnr(pred, gt, window))
        rep.ssim.append(ssim(pred, gt, window))
        rep.rmse_hu.append(rmse(pred, gt, window))
    return rep
