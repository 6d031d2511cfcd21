"""Small float64 autodiff stack: tensors, tape, MLPs, Adam."""

from .nn import ACTIVATIONS, Mlp, MlpSpec
from .optim import AdamState, adam_step
from .tensor import (
    OPS,
    DomainError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    forward_op,
)
from .train import TrainingDivergence, fit_minibatch, gradients

__all__ = [
    "ACTIVATIONS", "OPS", "AdamState", "DomainError", "Mlp", "MlpSpec", "NonFiniteError",
    "ShapeError", "Tape", "Tensor", "TrainingDivergence", "adam_step", "backward",
    "fit_minibatch", "forward_op", "gradients",
]
