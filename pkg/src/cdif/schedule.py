"""Diffusion schedule and the degradation / sampling-step algebra.

Every operator here is written with plain arithmetic so it accepts numpy
arrays and torch tensors alike (autograd flows through when tensors are
passed). Schedule coefficients are kept as Python floats (double precision).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np


class SingularStepError(ValueError):
    """Raised when an operation would divide by ``1 - alpha_t = 0``."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Total step count ``T`` and coefficients ``alphas[0..T]``.

    ``alphas[0] == 1`` is prepended so that redegradation to step 0 returns the
    prediction itself.
    """

    T: int
    alphas: tuple[float, ...]

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        a = self.alphas
        if len(a) != self.T + 1:
            raise ValueError(f"expected {self.T + 1} alphas, got {len(a)}")
        if a[0] != 1.0 or a[-1] != 0.0:
            raise ValueError("alphas must start at 1 and end at 0")
        if any(not (0.0 <= v <= 1.0) for v in a):
            raise ValueError("alphas must lie in [0, 1]")
        if any(a[t] >= a[t - 1] for t in range(1, len(a))):
            raise ValueError("alphas must be strictly decreasing")

    def alpha(self, t: int) -> float:
        _check_step(t, self)
        return self.alphas[t]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray([self.T], dtype="<i8").tobytes())
        h.update(np.asarray(self.alphas, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def make_schedule(T: int) -> DiffusionSchedule:
    """Linear schedule with ``alphas[1] = 0.999`` down to ``alphas[T] = 0``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if T == 1:
        return DiffusionSchedule(1, (1.0, 0.0))
    alphas = [1.0] + [0.999 * (T - t) / (T - 1) for t in range(1, T + 1)]
    alphas[-1] = 0.0
    return DiffusionSchedule(T, tuple(alphas))


def _check_step(t, s: DiffusionSchedule):
    if not isinstance(t, (int, np.integer)) or not 0 <= t <= s.T:
        raise ValueError(f"step index {t!r} outside 0..{s.T}")


def _check_pair(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def degrade_mean_preserving(x0, xT, t: int, s: DiffusionSchedule):
    """``alpha_t * x0 + (1 - alpha_t) * xT``."""
    _check_pair(x0, xT)
    a = s.alpha(t)
    return a * x0 + (1.0 - a) * xT


def degrade_classical(x0, xT, t: int, s: DiffusionSchedule):
    """Square-root weighted operator used by classical/cold diffusion.

    Not mean preserving: for zero-mean ``xT`` the expectation is
    ``sqrt(alpha_t) * x0``.
    """
    _check_pair(x0, xT)
    a = s.alpha(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * xT


def redegrade(x0_hat, xT, t: int, s: DiffusionSchedule):
    """Re-degrade the latest prediction to step ``t``."""
    return degrade_mean_preserving(x0_hat, xT, t, s)


def estimate_endpoint(x_t, x0_hat, t: int, s: DiffusionSchedule):
    """Invert the mean-preserving operator for the endpoint image."""
    _check_pair(x_t, x0_hat)
    a = s.alpha(t)
    if t == 0 or a >= 1.0:
        raise SingularStepError(f"cannot estimate endpoint at step {t} (alpha = 1)")
    return (x_t - a * x0_hat) / (1.0 - a)


def improved_step(x_t, x0_hat, t: int, s: DiffusionSchedule):
    """One step of the error-compensating sampler, from ``t`` to ``t - 1``.

    Computes ``x_t - D(x0_hat, xT_hat, t) + D(x0_hat, xT_hat, t - 1)`` in its
    simplified form ``x_t + (alpha_{t-1} - alpha_t) * (x0_hat - xT_hat)``.
    At ``t - 1 == 0`` the result is ``x0_hat`` exactly.
    """
    xT_hat = estimate_endpoint(x_t, x0_hat, t, s)
    if t == 1:
        return 1.0 * x0_hat
    return x_t + (s.alphas[t - 1] - s.alphas[t]) * (x0_hat - xT_hat)
