from . import tensor as ops
from .nn import (MLP, DimensionError, MLPSpec, encoded_width, input_gradient, mlp_forward,
                 positional_encoding, siren_bound, siren_init, softmax)
from .optim import Adam, OptimizerState, adam_step
from .serialize import CheckpointError, load_tensors, save_tensors
from .tensor import GraphError, NumericError, Tensor, backward, grad, no_grad

__all__ = [
    "Adam", "CheckpointError", "DimensionError", "GraphError", "MLP", "MLPSpec", "NumericError",
    "OptimizerState", "Tensor", "adam_step", "backward", "encoded_width", "grad", "input_gradient",
    "load_tensors", "mlp_forward", "no_grad", "ops", "positional_encoding", "save_tensors",
    "siren_bound", "siren_init", "softmax",
]
