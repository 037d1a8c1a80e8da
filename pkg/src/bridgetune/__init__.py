"""Stochastic-bridge running-cost regularizers for parameter-efficient tuning."""

from .bridges import BROWNIAN, OU, BridgeSpec
from .latent_map import EndpointTable, FitMapConfig, MapNet
from .pets import PetConfig
from .pipeline import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "BROWNIAN",
    "OU",
    "BridgeSpec",
    "EndpointTable",
    "FitMapConfig",
    "MapNet",
    "PetConfig",
    "TrainConfig",
    "__version__",
]
