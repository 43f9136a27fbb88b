from . import functional
from .functional import BatchNormState, NoiseSpec, batch_norm, conv2d, dense, dropout, flatten, softmax
from .gradcheck import grad_check, relative_error, tensor_relative_error
from .layers import LAYER_KINDS, LayerSpec, Module, Sequential
from .optim import OptimizerState, adam_step, sgd_step, step
from .tensor import (DimensionError, EngineError, NumericError, ParameterError, StateError, Tensor,
                     UsageError, clip, concat, exp, log, relu, sigmoid)

__all__ = [
    "BatchNormState", "DimensionError", "EngineError", "LAYER_KINDS", "LayerSpec", "Module",
    "NoiseSpec", "NumericError", "OptimizerState", "ParameterError", "Sequential", "StateError", "Tensor",
    "UsageError", "adam_step", "batch_norm", "clip", "concat", "conv2d", "dense", "dropout", "exp",
    "flatten", "functional", "grad_check", "log", "relu", "relative_error", "sgd_step", "sigmoid",
    "softmax", "step", "tensor_relative_error",
]
