"""Contextual error-modulated restoration network.

A small U-Net (two down blocks, a middle block, two up blocks and an output
convolution) takes the 3-channel context stack ``(prev, x_t, next)`` and the
step index. The step is encoded sinusoidally, passed through a shared MLP and,
after every down/up-sampling operation, projected to the channel width and
added to the activations. When the error-modulation inputs are supplied the
step feature is first scaled and shifted per stage with factors predicted
from the latest prediction and the low-dose endpoint.

The network sees images scaled by ``1 / hu_scale`` and predicts a correction
to the centre channel, so the output stays in HU.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_STAGES = 4  # down1, down2, up1, up2


@dataclass(frozen=True)
class NetConfig:
    side: int = 64
    T: int = 10
    base_channels: int = 32
    embed_dim: int = 128
    emm_channels: int = 16
    input_channels: int = 3
    hu_scale: float = 1000.0

    def __post_init__(self):
        if self.input_channels != 3:
            raise ValueError("input_channels must be 3 (prev, current, next)")
        if self.side < 4 or self.side % 4:
            raise ValueError(f"side must be divisible by 4, got {self.side}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if min(self.T, self.base_channels, self.embed_dim, self.emm_channels) < 1:
            raise ValueError(f"invalid config {self}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ModulationFactors:
    beta: torch.Tensor  # (B, N_STAGES, embed_dim)
    gamma: torch.Tensor


def stack_context(prev, cur, nxt):
    """Concatenate ``(prev, cur, next)`` along a new channel axis (axis -3)."""
    shapes = {tuple(prev.shape), tuple(cur.shape), tuple(nxt.shape)}
    if len(shapes) != 1:
        raise ValueError(f"context slices differ in shape: {sorted(shapes)}")
    if isinstance(cur, torch.Tensor):
        return torch.stack([prev, cur, nxt], dim=-3)
    return np.stack([prev, cur, nxt], axis=-3)


def sinusoidal_embed(t, dim: int) -> torch.Tensor:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = 10000^(-2i/dim)``.

    ``t`` may be an int (returns ``(dim,)``) or a 1-D tensor (returns ``(B, dim)``).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor)
    tt = torch.as_tensor([t] if scalar else t, dtype=torch.float64).reshape(-1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(dim // 2, dtype=torch.float64) * 2.0 / dim)
    ang = tt[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(len(tt), dim)
    return emb[0] if scalar else emb


def modulate(f, m: ModulationFactors):
    return m.beta * f + m.gamma


def _groups(c):
    # several channels per group so per-channel step shifts survive normalization
    for g in (8, 4, 2):
        if c % g == 0 and c // g >= 4:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TimeMLP(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        pe = sinusoidal_embed(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(pe)))


class ErrorModulation(nn.Module):
    """Shallow conv net over ``(x0_hat, xT)``; global average pool; beta/gamma heads.

    Heads start with zero weights and biases 1 / 0, so the module is an exact
    identity until trained.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.emm_channels
        self.hu_scale = cfg.hu_scale
        self.embed_dim = cfg.embed_dim
        self.conv1 = nn.Conv2d(2, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.beta = nn.Linear(c, N_STAGES * cfg.embed_dim)
        self.gamma = nn.Linear(c, N_STAGES * cfg.embed_dim)
        self.reset_heads()

    def reset_heads(self):
        with torch.no_grad():
            self.beta.weight.zero_()
            self.beta.bias.fill_(1.0)
            self.gamma.weight.zero_()
            self.gamma.bias.zero_()

    def forward(self, x0_hat, xT) -> ModulationFactors:
        x = torch.cat([x0_hat, xT], dim=1) / self.hu_scale
        h = F.silu(self.conv2(F.silu(self.conv1(x))))
        h = h.mean(dim=(2, 3))
        shape = (h.shape[0], N_STAGES, self.embed_dim)
        return ModulationFactors(self.beta(h).view(shape), self.gamma(h).view(shape))


def _as_batch(x, channels):
    if x.dim() == 2 and channels == 1:
        x = x[None]
    if x.dim() == 3:
        return x[None], True
    return x, False


class CLEARNet(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        c, E = cfg.base_channels, cfg.embed_dim
        widths = (2 * c, 4 * c, 2 * c, c)  # channel count at each injection stage
        self.time_mlp = TimeMLP(E)
        self.stage_proj = nn.ModuleList(nn.Linear(E, w) for w in widths)

        self.inc = nn.Conv2d(3, c, 3, padding=1)
        self.enc0 = ResBlock(c, c)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc1 = ResBlock(2 * c, 2 * c)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(4 * c, 4 * c)
        self.mid = ResBlock(4 * c, 4 * c)
        self.up1 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.dec1 = ResBlock(4 * c, 2 * c)
        self.up2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec2 = ResBlock(2 * c, c)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, 1, 3, padding=1)

        self.emm = ErrorModulation(cfg)

    def theta_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("emm.")]

    def phi_parameters(self):
        return list(self.emm.parameters())

    def time_embed(self, t):
        return self.time_mlp(t)

    def emm_factors(self, x0_hat, xT) -> ModulationFactors:
        x0_hat, _ = _as_batch(x0_hat, 1)
        xT, _ = _as_batch(xT, 1)
        if x0_hat.shape != xT.shape:
            raise ValueError(f"shape mismatch: {tuple(x0_hat.shape)} vs {tuple(xT.shape)}")
        return self.emm(x0_hat, xT)

    def _steps(self, t, batch):
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ValueError(f"expected {batch} step indices, got {t.numel()}")
        if int(t.min()) < 0 or int(t.max()) > self.cfg.T:
            raise ValueError(f"step index outside 0..{self.cfg.T}: {t.tolist()}")
        return t

    def forward(self, x_c, t, emm=None):
        x_c, unbatched = _as_batch(x_c, 3)
        B, C, H, W = x_c.shape
        if C != 3 or H != W or H % 4:
            raise ValueError(f"expected (B, 3, S, S) input with S divisible by 4, got {tuple(x_c.shape)}")
        t = self._steps(t, B)

        f = self.time_embed(t)  # (B, E)
        feats = f[:, None, :].expand(B, N_STAGES, f.shape[-1])
        if emm is not None:
            x0_hat, xT = emm
            feats = modulate(feats, self.emm_factors(x0_hat, xT))

        def inject(h, k):
            return h + self.stage_proj[k](feats[:, k])[:, :, None, None]

        x = x_c / self.cfg.hu_scale
        h0 = self.enc0(self.inc(x))
        h1 = self.enc1(inject(self.down1(h0), 0))
        h2 = self.enc2(inject(self.down2(h1), 1))
        h = self.mid(h2)
        h = inject(self.up1(F.interpolate(h, scale_factor=2, mode="nearest")), 2)
        h = self.dec1(torch.cat([h, h1], dim=1))
        h = inject(self.up2(F.interpolate(h, scale_factor=2, mode="nearest")), 3)
        h = self.dec2(torch.cat([h, h0], dim=1))
        corr = self.out(F.silu(self.out_norm(h)))
        y = x_c[:, 1:2] + self.cfg.hu_scale * corr
        return y[0] if unbatched else y
