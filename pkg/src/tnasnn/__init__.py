"""Spiking networks trained with twin-network logit matching and delayed ternary compression."""

from .config import TrainConfig, load_config
from .snn import LifParams, forward_timesteps, kaiming_init, parse_architecture
from .tensor import Tensor, backward
from .training import train

__all__ = [
    "LifParams",
    "Tensor",
    "TrainConfig",
    "backward",
    "forward_timesteps",
    "kaiming_init",
    "load_config",
    "parse_architecture",
    "train",
]
__version__ = "0.1.0"
