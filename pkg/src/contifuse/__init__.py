"""Continuous-decomposition fusion of infrared and visible images."""

from contifuse.model import ContiFuse, ModelConfig, StateStack, pad_to_stride
from contifuse.losses import (
    decomposition_loss_full,
    decomposition_loss_sds,
    gamma_distance,
    sds_sample,
    total_loss,
)

__all__ = [
    "ContiFuse",
    "ModelConfig",
    "StateStack",
    "pad_to_stride",
    "decomposition_loss_full",
    "decomposition_loss_sds",
    "gamma_distance",
    "sds_sample",
    "total_loss",
]

__version__ = "0.1.0"
