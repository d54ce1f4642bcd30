"""From-scratch numpy tensor engine and the modified U-Net.

Tensors are rank-4 float64 ndarrays laid out (batch, channel, height,
width). All forward passes return an opaque cache consumed by the
matching backward pass; gradients are exact reverse-mode derivatives
validated against central finite differences.
"""

from .unet import (UNetConfig, ModelParams, build_unet, forward, backward,
                   export_activations, parameter_count)
from .checkpoint import ModelCheckpoint, save_checkpoint, load_checkpoint

__all__ = [
    "UNetConfig", "ModelParams", "build_unet", "forward", "backward",
    "export_activations", "parameter_count",
    "ModelCheckpoint", "save_checkpoint", "load_checkpoint",
]
