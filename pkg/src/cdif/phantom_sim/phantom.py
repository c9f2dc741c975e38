"""Random ellipse phantoms in HU.

A phantom is a water-equivalent body disk (0 HU) in an air field
(-1000 HU) holding non-overlapping inner ellipses, some of which carry a
nested core. Adjacent slices are produced by perturbing every ellipse
parameter along a fixed random direction, so slice ``k`` and ``k + 1`` are
correlated but not identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AIR_HU = -1000.0
WATER_HU = 0.0
HU_MIN, HU_MAX = -1000.0, 3000.0
SLICE_PERTURBATION = 0.02
BODY_RADIUS = 0.8  # fraction of the half field of view


@dataclass(frozen=True)
class Ellipse:
    cx: float  # centre, in units of the half field of view ([-1, 1])
    cy: float
    a: float  # semi-axes, same units
    b: float
    angle: float  # radians
    hu: float

    def as_array(self):
        return np.array([self.cx, self.cy, self.a, self.b, self.angle, self.hu])


@dataclass
class Phantom:
    image: np.ndarray
    ellipses: list[Ellipse]
    seed: int
    slice_offset: int = 0
    directions: np.ndarray | None = field(default=None, repr=False)

    @property
    def side(self) -> int:
        return self.image.shape[0]


def _check_side(side):
    if side < 16 or side % 2:
        raise ValueError(f"side must be an even integer >= 16, got {side}")


def render(ellipses, side: int, supersample: int = 4) -> np.ndarray:
    """Rasterise ellipses painted in order (later ones overwrite), with area averaging."""
    _check_side(side)
    n = side * supersample
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    X, Y = np.meshgrid(c, -c)
    img = np.full((n, n), AIR_HU)
    for e in ellipses:
        ca, sa = np.cos(e.angle), np.sin(e.angle)
        dx, dy = X - e.cx, Y - e.cy
        u = (dx * ca + dy * sa) / e.a
        v = (-dx * sa + dy * ca) / e.b
        img[u * u + v * v <= 1.0] = e.hu
    img = img.reshape(side, supersample, side, supersample).mean(axis=(1, 3))
    return np.clip(img, HU_MIN, HU_MAX)


def _body():
    return Ellipse(0.0, 0.0, BODY_RADIUS, BODY_RADIUS, 0.0, WATER_HU)


def _inner_hu(rng):
    u = rng.uniform()
    if u < 0.15:
        return rng.uniform(300.0, 1200.0)  # bone-like
    if u < 0.3:
        return rng.uniform(-200.0, -60.0)  # fat-like
    return rng.choice([-1, 1]) * rng.uniform(20.0, 150.0)  # soft-tissue lesion


def _sample_ellipses(n_ellipses, rng):
    body = _body()
    placed, bounds = [body], []
    tries = 0
    while len(bounds) < n_ellipses and tries < 2000:
        tries += 1
        a = rng.uniform(0.05, 0.22)
        b = a * rng.uniform(0.5, 1.0)
        # keep the bounding circle inside the body
        r = rng.uniform(0.0, 1.0) ** 0.5 * (BODY_RADIUS - a - 0.04)
        if r < 0:
            continue
        phi = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(phi), r * np.sin(phi)
        if any(np.hypot(cx - x, cy - y) < a + ra + 0.03 for x, y, ra in bounds):
            continue
        e = Ellipse(cx, cy, a, b, rng.uniform(0, np.pi), _inner_hu(rng))
        placed.append(e)
        bounds.append((cx, cy, a))
        if rng.uniform() < 0.3:
            k = rng.uniform(0.3, 0.6)
            placed.append(Ellipse(cx, cy, a * k, b * k, e.angle, _inner_hu(rng)))
    return placed


def _perturb(ellipses, directions, offset):
    out = []
    for e, d in zip(ellipses, directions):
        p = e.as_array() * (1.0 + SLICE_PERTURBATION * offset * d)
        out.append(Ellipse(*p))
    return out


def generate_phantom(side: int, n_ellipses: int, seed: int, slice_offset: int = 0) -> Phantom:
    """Random phantom; ``slice_offset`` renders a neighbouring slice of the same object."""
    _check_side(side)
    if n_ellipses < 0:
        raise ValueError("n_ellipses must be >= 0")
    rng = np.random.default_rng(seed)
    ellipses = _sample_ellipses(n_ellipses, rng)
    directions = rng.uniform(-1.0, 1.0, size=(len(ellipses), 6))
    if slice_offset:
        ellipses = _perturb(ellipses, directions, slice_offset)
    return Phantom(render(ellipses, side), ellipses, seed, slice_offset, directions)
