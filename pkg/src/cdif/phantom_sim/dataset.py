"""Paired normal-dose / low-dose datasets on disk.

A dataset directory holds ``manifest.txt`` plus one CDIF file per slice and
role. Each phantom contributes a triple of adjacent slices (offsets -1, 0, +1)
so that the centre slice has context neighbours. File names::

    t{id:04d}_s{offset:+d}_nd.cdif           normal dose (FBP of noiseless projections)
    t{id:04d}_s{offset:+d}_ld{dose}.cdif     low dose at a given dose fraction

The manifest is line oriented: ``key value...`` header lines followed by one
``triple <id> <phantom_seed> <n_ellipses>`` line per phantom.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cdif_io import read_slice, write_slice
from .noise import NoiseModel, dose_degrade
from .phantom import generate_phantom
from .tomo import DEFAULT_N_ANGLES, DEFAULT_PIXEL_MM, fbp_reconstruct, forward_project, hu_to_mu, mu_to_hu

MANIFEST = "manifest.txt"
OFFSETS = (-1, 0, 1)


def dose_tag(dose: float) -> str:
    return f"{float(dose):g}"


def slice_name(triple: int, offset: int, dose: float | None = None) -> str:
    role = "nd" if dose is None else f"ld{dose_tag(dose)}"
    return f"t{triple:04d}_s{offset:+d}_{role}.cdif"


def _derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def simulate_slice(phantom_seed, n_ellipses, offset, side, doses, noise_key,
                   n_angles=DEFAULT_N_ANGLES, pixel_mm=DEFAULT_PIXEL_MM, nm_base=None):
    """Render one slice; returns ``(nd_hu, {dose: ld_hu})``."""
    nm_base = nm_base or NoiseModel()
    ph = generate_phantom(side, n_ellipses, phantom_seed, slice_offset=offset)
    sino = forward_project(hu_to_mu(ph.image), n_angles, pixel_mm=pixel_mm)
    nd = mu_to_hu(fbp_reconstruct(sino, side))
    lds = {}
    for j, d in enumerate(doses):
        nm = NoiseModel(nm_base.I0, nm_base.sigma_e2, d)
        seed = _derive_seed(noise_key, offset + 1, j, round(d * 1e6))
        lds[d] = mu_to_hu(fbp_reconstruct(dose_degrade(sino, nm, seed), side))
    return nd, lds


def _simulate_triple(args):
    i, seed, side, doses, n_angles, pixel_mm = args
    rng = np.random.default_rng(_derive_seed(seed, i))
    phantom_seed = int(rng.integers(0, 2**31 - 1))
    n_ell = int(rng.integers(3, 9))
    slices = [
        simulate_slice(phantom_seed, n_ell, k, side, doses, _derive_seed(seed, i, 7),
                       n_angles, pixel_mm)
        for k in OFFSETS
    ]
    return i, phantom_seed, n_ell, slices


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CDIF_THREADS", "1")))
    except ValueError:
        return 1


def make_dataset(out_dir, n_images: int, side: int, doses, seed: int,
                 n_angles: int = DEFAULT_N_ANGLES, pixel_mm: float = DEFAULT_PIXEL_MM) -> Path:
    """Simulate ``n_images`` slice triples and write them under ``out_dir``."""
    out = Path(out_dir)
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    doses = [float(d) for d in doses]
    if not doses or any(not 0 < d <= 1 for d in doses):
        raise ValueError(f"doses must lie in (0, 1], got {doses}")
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(i, seed, side, doses, n_angles, pixel_mm) for i in range(n_images)]
    n_workers = _workers()
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as ex:
            results = list(ex.map(_simulate_triple, jobs))
    else:
        results = [_simulate_triple(j) for j in jobs]

    lines = [
        "# cdif dataset v1",
        f"side {side}",
        f"n_angles {n_angles}",
        f"pixel_mm {pixel_mm:g}",
        "doses " + " ".join(dose_tag(d) for d in doses),
        f"seed {seed}",
        f"n_triples {n_images}",
    ]
    for i, phantom_seed, n_ell, slices in results:
        for k, (nd, lds) in zip(OFFSETS, slices):
            write_slice(out / slice_name(i, k), nd)
            for d in doses:
                write_slice(out / slice_name(i, k, d), lds[d])
        lines.append(f"triple {i:04d} {phantom_seed} {n_ell}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


@dataclass
class TripleRecord:
    index: int
    phantom_seed: int
    n_ellipses: int


class Dataset:
    """Read-only view of a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST} in {self.root}")
        self.meta: dict[str, list[str]] = {}
        self.triples: list[TripleRecord] = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *vals = line.split()
            if key == "triple":
                self.triples.append(TripleRecord(int(vals[0]), int(vals[1]), int(vals[2])))
            else:
                self.meta[key] = vals
        self.side = int(self.meta["side"][0])
        self.doses = [float(d) for d in self.meta["doses"]]
        self.seed = int(self.meta["seed"][0])

    def __len__(self):
        return len(self.triples)

    def _dose(self, dose):
        if dose is None:
            if len(self.doses) != 1:
                raise ValueError(f"dataset has several doses {self.doses}; pick one")
            return self.doses[0]
        for d in self.doses:
            if abs(d - float(dose)) < 1e-12:
                return d
        raise KeyError(f"dose {dose} not in dataset (have {self.doses})")

    def nd(self, triple: int, offset: int = 0) -> np.ndarray:
        return read_slice(self.root / slice_name(triple, offset))

    def ld(self, triple: int, offset: int = 0, dose=None) -> np.ndarray:
        return read_slice(self.root / slice_name(triple, offset, self._dose(dose)))

    def arrays(self, dose=None, indices=None):
        """Stacked float32 arrays ``(x0, xT, prev, next)`` for the centre slices.

        ``prev``/``next`` are the low-dose neighbours used as context.
        """
        d = self._dose(dose)
        idx = [t.index for t in self.triples] if indices is None else list(indices)
        x0 = np.stack([self.nd(i) for i in idx])
        xT = np.stack([self.ld(i, 0, d) for i in idx])
        prev = np.stack([self.ld(i, -1, d) for i in idx])
        nxt = np.stack([self.ld(i, 1, d) for i in idx])
        return tuple(a.astype(np.float32) for a in (x0, xT, prev, nxt))
