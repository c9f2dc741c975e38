from .checkpoint import NetParams, load_checkpoint, save_checkpoint
from .net import (
    CLEARNet,
    ModulationFactors,
    NetConfig,
    modulate,
    sinusoidal_embed,
    stack_context,
)
