"""Generalized (warm-start) diffusion for low-dose CT denoising at desk scale."""

from .schedule import (
    DiffusionSchedule,
    SingularStepError,
    degrade_classical,
    degrade_mean_preserving,
    estimate_endpoint,
    improved_step,
    make_schedule,
    redegrade,
)

__version__ = "0.1.0"
