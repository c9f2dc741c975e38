"""One-shot fusion of a sampling trajectory for a new dose level.

The trajectory states ``x_0 .. x_{T-1}`` all share the same mean and differ in
residual noise. A convex combination ``sum_t w_t x_t`` is fitted to a single
reference normal-dose image by minimising a feature-space loss over patches,
with the network frozen and only the ``T`` weights learned (softmax logits).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sampler import Trajectory, sample

EXTRACTOR_SEED = 20230
HU_SCALE = 1000.0


@dataclass
class OSLWeights:
    logits: np.ndarray

    @property
    def w(self) -> np.ndarray:
        z = np.asarray(self.logits, dtype=np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    @property
    def T(self) -> int:
        return len(self.logits)

    @classmethod
    def uniform(cls, T):
        return cls(np.zeros(T))


@dataclass
class PatchSet:
    traj: np.ndarray  # (P, T, size, size); [:, t] is the patch of x_t
    target: np.ndarray  # (P, size, size)
    coords: list[tuple[int, int]]
    size: int
    stride: int

    def __len__(self):
        return len(self.coords)


@dataclass
class OSLConfig:
    lr: float = 2e-3
    iters: int = 3000
    batch: int = 8
    patch_size: int = 32
    stride: int = 16
    seed: int = 0


@dataclass
class OSLResult:
    weights: OSLWeights
    objective: float
    history: list[float] = field(repr=False)
    trajectory: Trajectory | None = field(default=None, repr=False)


def grid_count(side, size, stride):
    return ((side - size) // stride + 1) ** 2


def extract_patches(traj: Trajectory, target, size: int, stride: int) -> PatchSet:
    stack = traj.by_step()  # (T, H, W)
    target = np.asarray(target, dtype=np.float64)
    H, W = target.shape
    if stack.shape[1:] != (H, W):
        raise ValueError(f"trajectory images {stack.shape[1:]} vs target {(H, W)}")
    if size > min(H, W) or size < 1:
        raise ValueError(f"patch size {size} does not fit a {H}x{W} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    coords = [(r, c) for r in range(0, H - size + 1, stride) for c in range(0, W - size + 1, stride)]
    tp = np.stack([stack[:, r:r + size, c:c + size] for r, c in coords])
    gp = np.stack([target[r:r + size, c:c + size] for r, c in coords])
    return PatchSet(tp, gp, coords, size, stride)


class FeatureExtractor(nn.Module):
    """Frozen three-layer conv stack with a fixed random initialisation."""

    def __init__(self, seed: int = EXTRACTOR_SEED):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        shapes = [(8, 1), (16, 8), (16, 16)]
        for k, (co, ci) in enumerate(shapes):
            w = torch.randn(co, ci, 3, 3, generator=g, dtype=torch.float64) * (2.0 / (ci * 9)) ** 0.5
            self.register_buffer(f"w{k}", w)
        self.requires_grad_(False)

    def forward(self, x):
        """``x``: (N, H, W) in HU. Returns the list of feature maps."""
        h = (x / HU_SCALE)[:, None]
        feats = []
        for k, stride in enumerate((1, 2, 1)):
            h = F.conv2d(h, getattr(self, f"w{k}"), stride=stride, padding=1)
            if k < 2:
                h = F.relu(h)
            feats.append(h)
        return feats


_EXTRACTOR: FeatureExtractor | None = None


def _extractor():
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = FeatureExtractor()
    return _EXTRACTOR


def _feature_loss(a, b):
    """Per-sample loss for batched tensors ``(N, H, W)``."""
    fa, fb = _extractor()(a), _extractor()(b)
    return sum(((x - y) ** 2).mean(dim=(1, 2, 3)) for x, y in zip(fa, fb))


def perceptual_loss(a, b) -> float:
    a = torch.as_tensor(np.asarray(a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[None], b[None]
    with torch.no_grad():
        return float(_feature_loss(a, b).mean())


def osl_apply(w, traj: Trajectory) -> np.ndarray:
    """``sum_t w[t] * x_t`` with ``w[0]`` weighting the final image."""
    w = w.w if isinstance(w, OSLWeights) else np.asarray(w, dtype=np.float64)
    if len(w) != traj.T:
        raise ValueError(f"{len(w)} weights for a trajectory of length {traj.T}")
    return np.tensordot(w, traj.by_step(), axes=1)


def _fused(w, patches):
    # patches: (N, T, s, s); w: (T,)
    return torch.einsum("t,ntij->nij", w, patches)


def osl_objective(w, ps: PatchSet) -> float:
    """Mean feature loss of the fused patches against the target over the whole grid."""
    w = w.w if isinstance(w, OSLWeights) else np.asarray(w, dtype=np.float64)
    tp = torch.as_tensor(ps.traj)
    gp = torch.as_tensor(ps.target)
    with torch.no_grad():
        return float(_feature_loss(_fused(torch.as_tensor(w), tp), gp).mean())


def fit_weights(ps: PatchSet, cfg: OSLConfig = OSLConfig(), callback=None) -> OSLResult:
    """Adam on softmax logits; patch order reshuffled every pass over the grid."""
    T = ps.traj.shape[1]
    tp = torch.as_tensor(ps.traj)
    gp = torch.as_tensor(ps.target)
    logits = torch.zeros(T, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([logits], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order, pos = rng.permutation(len(ps)), 0
    history = []
    for it in range(cfg.iters):
        take = []
        while len(take) < min(cfg.batch, len(ps)):
            if pos == len(order):
                order, pos = rng.permutation(len(ps)), 0
            take.append(order[pos])
            pos += 1
        idx = torch.as_tensor(np.asarray(take))
        w = torch.softmax(logits, dim=0)
        loss = _feature_loss(_fused(w, tp[idx]), gp[idx]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if callback is not None:
            callback(it, OSLWeights(logits.detach().numpy().copy()))
    weights = OSLWeights(logits.detach().numpy().copy())
    return OSLResult(weights, osl_objective(weights, ps), history)


def osl_fit(ld_new, prev, nxt, nd_ref, params, schedule, cfg: OSLConfig = OSLConfig(),
            callback=None) -> OSLResult:
    """Sample the trajectory of ``ld_new`` once, then fit fusion weights to ``nd_ref``."""
    params.check_schedule(schedule)
    _, traj = sample(ld_new, prev, nxt, params, schedule)
    ps = extract_patches(traj, nd_ref, cfg.patch_size, cfg.stride)
    res = fit_weights(ps, cfg, callback)
    res.trajectory = traj
    return res
