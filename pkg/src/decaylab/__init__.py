"""decaylab: a desk-scale laboratory for decay mechanisms in linear attention."""

from .decay import DecayConfig
from .model import ModelConfig, init_params, lm_forward, param_count
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, train_loop

__all__ = [
    "DecayConfig", "ModelConfig", "Tape", "Tensor", "TrainConfig",
    "backward", "init_params", "lm_forward", "param_count", "train_loop",
]
__version__ = "0.1.0"
