from . import autodiff as ad
from .autodiff import Tape, Tensor, gradient
from .conv import conv3d
from .mlp import (MlpSpec, ParamSet, encoded_dim, forward_mlp, geometric_init, init_mlp,
                  positional_encode, positional_encode_jacobian)
from .optim import adam_update, step_decay

__all__ = [
    "ad", "Tape", "Tensor", "gradient", "conv3d", "MlpSpec", "ParamSet", "encoded_dim",
    "forward_mlp", "geometric_init", "init_mlp", "positional_encode",
    "positional_encode_jacobian", "adam_update", "step_decay",
]
