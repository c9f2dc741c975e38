"""Parallel-beam projection and filtered back-projection.

The projector is Joseph-style: each ray is walked along the image axis it is
most aligned with and the image is linearly interpolated along the other
axis. Both the projector and the FBP back-projector are assembled once per
geometry as sparse matrices and cached.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

MU_WATER = 0.0192  # mm^-1
DEFAULT_PIXEL_MM = 5.0
DEFAULT_N_ANGLES = 180


def hu_to_mu(img_hu):
    return MU_WATER * (1.0 + np.asarray(img_hu, dtype=np.float64) / 1000.0)


def mu_to_hu(img_mu):
    return 1000.0 * (np.asarray(img_mu, dtype=np.float64) / MU_WATER - 1.0)


def default_n_detectors(side: int) -> int:
    n = int(np.ceil(side * np.sqrt(2.0))) + 2
    return n + (n % 2 == 0)


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam geometry; image of ``side`` x ``side`` pixels centred on the rotation axis."""

    side: int
    n_angles: int
    n_detectors: int
    pixel_mm: float = DEFAULT_PIXEL_MM
    detector_mm: float = DEFAULT_PIXEL_MM

    def __post_init__(self):
        if self.side < 1 or self.n_angles < 1 or self.n_detectors < 1:
            raise ValueError(f"invalid geometry {self}")
        if self.pixel_mm <= 0 or self.detector_mm <= 0:
            raise ValueError("pixel and detector spacing must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0) * self.detector_mm


@dataclass
class Sinogram:
    data: np.ndarray  # (n_angles, n_detectors) line integrals
    geometry: Geometry = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        g = self.geometry
        if self.data.shape != (g.n_angles, g.n_detectors):
            raise ValueError(
                f"sinogram shape {self.data.shape} does not match geometry "
                f"({g.n_angles}, {g.n_detectors})"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram has non-finite entries")


def _pixel_coords(side, pixel_mm):
    # column index -> x, row index -> y (row 0 at the top, y pointing up)
    c = (np.arange(side) - (side - 1) / 2.0) * pixel_mm
    return c, -c


@lru_cache(maxsize=8)
def projection_matrix(g: Geometry) -> sp.csr_matrix:
    """Sparse matrix mapping a flattened image (row-major) to a flattened sinogram."""
    n, pix = g.side, g.pixel_mm
    xs, ys = _pixel_coords(n, pix)
    s = g.detector_positions
    rows, cols, vals = [], [], []
    ray_idx = np.arange(g.n_detectors)
    for k, th in enumerate(g.angles):
        c, si = np.cos(th), np.sin(th)
        ray = k * g.n_detectors + ray_idx
        # ray: x*cos + y*sin = s, direction (-sin, cos)
        if abs(si) >= abs(c):
            # walk over columns (x fixed), interpolate in y
            y = (s[:, None] - xs[None, :] * c) / si  # (n_det, n)
            fr = ((n - 1) / 2.0) - y / pix  # fractional row index
            step = pix / abs(si)
            col_idx = np.broadcast_to(np.arange(n)[None, :], fr.shape)
            r0 = np.floor(fr).astype(np.int64)
            w1 = fr - r0
            for rr, ww in ((r0, 1.0 - w1), (r0 + 1, w1)):
                ok = (rr >= 0) & (rr < n) & (ww > 0)
                rows.append(np.broadcast_to(ray[:, None], fr.shape)[ok])
                cols.append(rr[ok] * n + col_idx[ok])
                vals.append(ww[ok] * step)
        else:
            # walk over rows (y fixed), interpolate in x
            x = (s[:, None] - ys[None, :] * si) / c
            fc = x / pix + (n - 1) / 2.0
            step = pix / abs(c)
            row_idx = np.broadcast_to(np.arange(n)[None, :], fc.shape)
            c0 = np.floor(fc).astype(np.int64)
            w1 = fc - c0
            for cc, ww in ((c0, 1.0 - w1), (c0 + 1, w1)):
                ok = (cc >= 0) & (cc < n) & (ww > 0)
                rows.append(np.broadcast_to(ray[:, None], fc.shape)[ok])
                cols.append(row_idx[ok] * n + cc[ok])
                vals.append(ww[ok] * step)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(g.n_angles * g.n_detectors, n * n),
    )
    return A.tocsr()


@lru_cache(maxsize=8)
def backprojection_matrix(g: Geometry) -> sp.csr_matrix:
    """Pixel-driven back-projection with linear interpolation on the detector."""
    n = g.side
    xs, ys = _pixel_coords(n, g.pixel_mm)
    X, Y = np.meshgrid(xs, ys)  # (row, col)
    X, Y = X.ravel(), Y.ravel()
    pix = np.arange(n * n)
    rows, cols, vals = [], [], []
    for k, th in enumerate(g.angles):
        s = X * np.cos(th) + Y * np.sin(th)
        fd = s / g.detector_mm + (g.n_detectors - 1) / 2.0
        d0 = np.floor(fd).astype(np.int64)
        w1 = fd - d0
        for dd, ww in ((d0, 1.0 - w1), (d0 + 1, w1)):
            ok = (dd >= 0) & (dd < g.n_detectors) & (ww > 0)
            rows.append(pix[ok])
            cols.append(k * g.n_detectors + dd[ok])
            vals.append(ww[ok])
    B = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n, g.n_angles * g.n_detectors),
    )
    return (B * (np.pi / g.n_angles)).tocsr()


@lru_cache(maxsize=8)
def _ramp_response(n_det: int, tau: float) -> np.ndarray:
    # spatial Ram-Lak kernel, transformed; avoids the DC offset of a sampled |f|
    size = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    k = np.concatenate([np.arange(0, size // 2 + 1), np.arange(size // 2 - 1, 0, -1)])
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * tau**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * tau) ** 2
    return np.real(np.fft.fft(h)) * tau


def ramp_filter(data: np.ndarray, tau: float) -> np.ndarray:
    n_det = data.shape[-1]
    H = _ramp_response(n_det, tau)
    padded = np.fft.fft(data, n=H.size, axis=-1)
    return np.real(np.fft.ifft(padded * H, axis=-1))[..., :n_det]


def forward_project(img, n_angles: int = DEFAULT_N_ANGLES, n_detectors: int | None = None,
                    pixel_mm: float = DEFAULT_PIXEL_MM) -> Sinogram:
    """Line integrals of an attenuation image (mm^-1) at equispaced angles over [0, pi)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"forward_project needs a square 2-D image, got shape {img.shape}")
    side = img.shape[0]
    if n_detectors is None:
        n_detectors = default_n_detectors(side)
    g = Geometry(side, int(n_angles), int(n_detectors), pixel_mm, pixel_mm)
    data = projection_matrix(g) @ img.ravel()
    return Sinogram(data.reshape(g.n_angles, g.n_detectors), g)


def fbp_reconstruct(sino: Sinogram, side: int) -> np.ndarray:
    """Ramp-filtered back-projection; returns attenuation (mm^-1)."""
    g = sino.geometry
    if side != g.side:
        raise ValueError(f"geometry is for side {g.side}, requested {side}")
    q = ramp_filter(sino.data, g.detector_mm)
    return (backprojection_matrix(g) @ q.ravel()).reshape(side, side)
