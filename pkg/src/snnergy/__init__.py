"""Desk-scale audio-visual spiking transformer with linear cross-modal attention."""

from .tensor import (
    ContractError,
    DimensionError,
    GradTape,
    Parameter,
    SpikeTensor,
    Tensor,
    backward,
    no_grad,
    precision,
)
from .neuron import LifParams, LifState, lif_forward_T, lif_step, surrogate_grad
from .model import ModelConfig, SNNergy, StageSpec, preset

__all__ = [
    "ContractError",
    "DimensionError",
    "GradTape",
    "LifParams",
    "LifState",
    "ModelConfig",
    "Parameter",
    "SNNergy",
    "SpikeTensor",
    "StageSpec",
    "Tensor",
    "backward",
    "lif_forward_T",
    "lif_step",
    "no_grad",
    "precision",
    "preset",
    "surrogate_grad",
]

__version__ = "0.1.0"
