"""Two-stage training of the restoration network.

Each iteration draws ``(x0, xT)`` pairs and a step ``t ~ U{1..T}`` per sample,
then

* stage I: ``x_t = D(x0, xT, t)``, ``x0_hat = R(stack(prev, x_t, next), t)``
* stage II: ``x_{t-1} = D(x0_hat, xT, t-1)``,
  ``x0_hathat = R(stack(prev, x_{t-1}, next), t-1, F(x0_hat, xT))``

and takes one Adam step on the sum of the two mean-squared errors. Errors
are measured on images scaled by ``1 / hu_scale``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .restoration_net.checkpoint import NetParams, load_checkpoint, param_key, save_checkpoint
from .restoration_net.net import CLEARNet, NetConfig, stack_context
from .schedule import DiffusionSchedule, degrade_mean_preserving, make_schedule, redegrade

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "stage1_mse", "stage2_mse", "total")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    iters: int = 5000
    batch: int = 4
    T: int = 10
    seed: int = 0
    ckpt_every: int = 1000
    dose: float | None = None
    base_channels: int = 32
    embed_dim: int = 128
    emm_channels: int = 16
    max_grad_norm: float = 0.0  # 0 disables clipping
    detach_stage1: bool = False  # block gradients from stage II into x0_hat

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        for name in ("iters", "batch", "T", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def net_config(self, side: int) -> NetConfig:
        return NetConfig(side=side, T=self.T, base_channels=self.base_channels,
                         embed_dim=self.embed_dim, emm_channels=self.emm_channels)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


@dataclass(frozen=True)
class Batch:
    x0: torch.Tensor  # (B, H, W)
    xT: torch.Tensor
    prev: torch.Tensor
    next: torch.Tensor
    t: torch.Tensor  # (B,) int64 in 1..T

    def __post_init__(self):
        shape = tuple(self.x0.shape)
        for name in ("xT", "prev", "next"):
            if tuple(getattr(self, name).shape) != shape:
                raise ValueError(f"batch field {name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if self.t.shape != (shape[0],):
            raise ValueError(f"expected {shape[0]} step indices")


@dataclass
class StepLosses:
    stage1: float
    stage2: float

    @property
    def total(self) -> float:
        return self.stage1 + self.stage2


def _per_sample(op, a, b, steps, s):
    return torch.stack([op(a[i], b[i], int(k), s) for i, k in enumerate(steps)])


def stage_outputs(net: CLEARNet, batch: Batch, s: DiffusionSchedule, detach_stage1=False):
    """Return ``(x0_hat, x0_hathat)``, both shaped ``(B, H, W)``."""
    t = batch.t
    x_t = _per_sample(degrade_mean_preserving, batch.x0, batch.xT, t, s)
    x0_hat = net(stack_context(batch.prev, x_t, batch.next), t)[:, 0]
    src = x0_hat.detach() if detach_stage1 else x0_hat
    x_prev = _per_sample(redegrade, src, batch.xT, t - 1, s)
    x0_hathat = net(
        stack_context(batch.prev, x_prev, batch.next), t - 1,
        emm=(src[:, None], batch.xT[:, None]),
    )[:, 0]
    return x0_hat, x0_hathat


def two_stage_loss(net, batch, s, detach_stage1=False):
    """Return ``(total, stage1_mse, stage2_mse)`` as tensors."""
    x0_hat, x0_hathat = stage_outputs(net, batch, s, detach_stage1)
    scale = net.cfg.hu_scale
    l1 = torch.mean(((x0_hat - batch.x0) / scale) ** 2)
    l2 = torch.mean(((x0_hathat - batch.x0) / scale) ** 2)
    return l1 + l2, l1, l2


def make_optimizer(net: CLEARNet, lr: float):
    return torch.optim.Adam(
        [{"params": net.theta_parameters()}, {"params": net.phi_parameters()}], lr=lr
    )


def train_step(batch: Batch, params: NetParams, s: DiffusionSchedule, optimizer,
               max_grad_norm: float = 0.0, detach_stage1: bool = False) -> StepLosses:
    """One Adam step on the two-stage objective; mutates ``params`` in place."""
    params.check_schedule(s)
    net = params.net
    net.train()
    total, l1, l2 = two_stage_loss(net, batch, s, detach_stage1)
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss at step {params.step}: stage1={l1.item()} stage2={l2.item()}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if max_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), max_grad_norm)
    optimizer.step()
    params.step += 1
    return StepLosses(l1.item(), l2.item())


def sample_batch(arrays, step: int, cfg: TrainConfig) -> Batch:
    x0, xT, prev, nxt = arrays
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(0, len(x0), cfg.batch)
    t = rng.integers(1, cfg.T + 1, cfg.batch)
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a[idx]))
    return Batch(as_t(x0), as_t(xT), as_t(prev), as_t(nxt), torch.from_numpy(t).long())


def init_params(cfg: TrainConfig, side: int, schedule: DiffusionSchedule | None = None) -> NetParams:
    schedule = schedule or make_schedule(cfg.T)
    torch.manual_seed(cfg.seed)
    net = CLEARNet(cfg.net_config(side))
    return NetParams(net, schedule.fingerprint, 0, {"train_config": asdict(cfg)})


def optimizer_state(params: NetParams, optimizer) -> dict[str, np.ndarray]:
    out = {}
    by_id = {id(p): n for n, p in params.net.named_parameters()}
    for p, st in optimizer.state.items():
        key = param_key(by_id[id(p)])
        for k, v in st.items():
            out[f"{key}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return out


def restore_optimizer(params: NetParams, optimizer, state: dict[str, np.ndarray]) -> None:
    for n, p in params.net.named_parameters():
        key = param_key(n)
        if f"{key}/exp_avg" not in state:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(np.asarray(state[f"{key}/step"]).reshape(-1)[0])),
            "exp_avg": torch.from_numpy(state[f"{key}/exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(state[f"{key}/exp_avg_sq"]).to(p.dtype),
        }


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_trace(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        return [(int(a), float(b), float(c), float(d)) for a, b, c, d in r]


def train_loop(dataset, cfg: TrainConfig, out_dir=None, resume=None, indices=None,
               iters: int | None = None):
    """Run training; returns ``(params, trace)``.

    ``trace`` rows are ``(iteration, stage1_mse, stage2_mse, total)``. With
    ``out_dir`` set, checkpoints ``ckpt_{step:06d}.cdck`` and ``final.cdck``
    and ``loss.csv`` are written there. ``resume`` is a checkpoint path to
    continue from; the loss trace beside it (if any) is carried over.
    ``iters`` overrides ``cfg.iters`` as the absolute stop step.
    """
    arrays = dataset.arrays(cfg.dose, indices) if hasattr(dataset, "arrays") else dataset
    if len(arrays[0]) == 0:
        raise ValueError("empty dataset")
    side = arrays[0].shape[-1]
    schedule = make_schedule(cfg.T)
    stop = cfg.iters if iters is None else iters
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace = []
    if resume is not None:
        params, opt_state = load_checkpoint(resume)
        params.check_schedule(schedule)
        optimizer = make_optimizer(params.net, cfg.lr)
        restore_optimizer(params, optimizer, opt_state)
        prior = Path(resume).parent / "loss.csv"
        if prior.exists():
            trace = [r for r in read_trace(prior) if r[0] <= params.step]
    else:
        params = init_params(cfg, side, schedule)
        optimizer = make_optimizer(params.net, cfg.lr)

    while params.step < stop:
        batch = sample_batch(arrays, params.step, cfg)
        losses = train_step(batch, params, schedule, optimizer, cfg.max_grad_norm, cfg.detach_stage1)
        trace.append((params.step, losses.stage1, losses.stage2, losses.total))
        if params.step % 100 == 0:
            log.info("step %d loss %.6f (I %.6f, II %.6f)", params.step, losses.total,
                     losses.stage1, losses.stage2)
        if out is not None and params.step % cfg.ckpt_every == 0:
            save_checkpoint(out / f"ckpt_{params.step:06d}.cdck", params, optimizer_state(params, optimizer))
            write_trace(out / "loss.csv", trace)
    if out is not None:
        save_checkpoint(out / "final.cdck", params, optimizer_state(params, optimizer))
        write_trace(out / "loss.csv", trace)
    params.net.eval()
    return params, trace
