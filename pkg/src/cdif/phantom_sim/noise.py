"""Projection-domain low-dose simulation (Poisson photon counts plus electronic noise)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tomo import Sinogram

COUNT_FLOOR = 1.0


@dataclass(frozen=True)
class NoiseModel:
    I0: float = 1.5e5
    sigma_e2: float = 10.0
    dose_fraction: float = 1.0

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError(f"I0 must be positive, got {self.I0}")
        if self.sigma_e2 < 0:
            raise ValueError(f"sigma_e2 must be >= 0, got {self.sigma_e2}")
        if not 0 < self.dose_fraction <= 1:
            raise ValueError(f"dose_fraction must be in (0, 1], got {self.dose_fraction}")

    @property
    def effective_i0(self) -> float:
        return self.dose_fraction * self.I0


def measured_counts(p_hd: np.ndarray, nm: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Detector readings: Poisson(I * exp(-p)) + N(0, sigma_e2)."""
    p_hd = np.asarray(p_hd, dtype=np.float64)
    if np.any(p_hd < 0):
        raise ValueError("line integrals must be non-negative")
    lam = nm.effective_i0 * np.exp(-p_hd)
    counts = rng.poisson(lam).astype(np.float64)
    if nm.sigma_e2 > 0:
        counts += rng.normal(0.0, np.sqrt(nm.sigma_e2), size=counts.shape)
    return counts


def dose_degrade(sino_hd: Sinogram, nm: NoiseModel, seed: int) -> Sinogram:
    """Low-dose sinogram ``ln(I / max(c, 1))`` from noisy counts ``c``."""
    rng = np.random.default_rng(seed)
    c = measured_counts(sino_hd.data, nm, rng)
    p_ld = np.log(nm.effective_i0 / np.maximum(c, COUNT_FLOOR))
    return Sinogram(p_ld, sino_hd.geometry)
