"""Restoration / redegradation sampling from a low-dose image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .restoration_net.checkpoint import NetParams
from .restoration_net.net import stack_context
from .schedule import DiffusionSchedule, improved_step

FIRST_STEP_MODES = ("none", "zeros")


@dataclass
class Trajectory:
    """States ``x_{T-1}, ..., x_0`` in the order they were produced."""

    images: list[np.ndarray]

    def __post_init__(self):
        for k, im in enumerate(self.images):
            if not np.all(np.isfinite(im)):
                raise FloatingPointError(f"trajectory state {k} is not finite")

    @property
    def T(self) -> int:
        return len(self.images)

    def at(self, t: int) -> np.ndarray:
        """State with ``t`` remaining steps (``at(0)`` is the final image)."""
        if not 0 <= t < self.T:
            raise IndexError(f"step {t} outside 0..{self.T - 1}")
        return self.images[self.T - 1 - t]

    def by_step(self) -> np.ndarray:
        """``(T, H, W)`` array with row ``t`` holding ``x_t``."""
        return np.stack(self.images[::-1])

    def scaled(self, k: float) -> "Trajectory":
        return Trajectory([k * im for im in self.images])


def _restore(net, x_c, t, emm):
    with torch.no_grad():
        return net(x_c, t, emm=emm)


def sample(xT, prev, nxt, params, s: DiffusionSchedule, first_step: str = "none"):
    """Denoise ``xT`` with ``T`` restoration / improved-step iterations.

    ``params`` is a :class:`NetParams` or any callable
    ``(x_c, t, emm) -> x0_pred`` working on ``(3, H, W)`` / ``(1, H, W)``
    tensors (used for oracle checks). ``first_step`` controls the error
    modulation inputs at ``t = T`` where no prediction exists yet: ``"none"``
    runs unmodulated, ``"zeros"`` feeds a zero image as the prediction.

    Returns ``(x0, trajectory)`` where ``x0`` is the last network prediction.
    """
    if first_step not in FIRST_STEP_MODES:
        raise ValueError(f"first_step must be one of {FIRST_STEP_MODES}")
    if isinstance(params, NetParams):
        params.check_schedule(s)
        net = params.net
        net.eval()
        dtype = next(net.parameters()).dtype
    else:
        net, dtype = params, torch.float64
    as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    xT_t, prev_t, next_t = as_t(xT), as_t(prev), as_t(nxt)
    if not (xT_t.shape == prev_t.shape == next_t.shape) or xT_t.dim() != 2:
        raise ValueError("xT, prev and next must be 2-D images of equal shape")

    x_t = xT_t
    x0_pred = None
    states = []
    for t in range(s.T, 0, -1):
        if x0_pred is None:
            emm = None if first_step == "none" else (torch.zeros_like(xT_t)[None], xT_t[None])
        else:
            emm = (x0_pred[None], xT_t[None])
        x0_pred = _restore(net, stack_context(prev_t, x_t, next_t), t, emm)[0]
        if not torch.all(torch.isfinite(x0_pred)):
            raise FloatingPointError(f"non-finite prediction at step {t}")
        x_t = improved_step(x_t, x0_pred, t, s)
        if not torch.all(torch.isfinite(x_t)):
            raise FloatingPointError(f"non-finite state at step {t - 1}")
        states.append(x_t.double().numpy().copy())
    return x0_pred.double().numpy(), Trajectory(states)
