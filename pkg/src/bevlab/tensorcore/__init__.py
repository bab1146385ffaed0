"""Minimal dense tensor engine with tape-based reverse-mode differentiation."""
from .tensor import (MemoryMeter, Parameter, Tape, TapeError, Tensor, TensorError, as_tensor,
                     backward, record, track)
from .ops import (MSAParams, add, concat, conv2d, interp_upsample, msa_layer, pixel_shuffle,
                  pixel_unshuffle, pool2d, relu, scale, sigmoid, sigmoid_focal_loss, tensor_mean,
                  tensor_sum, transposed_conv2d)
from .optim import Adam, sgd_adam_step
from . import checkpoint

__all__ = [
    "Adam", "MSAParams", "MemoryMeter", "Parameter", "Tape", "TapeError", "Tensor", "TensorError",
    "add", "as_tensor", "backward", "checkpoint", "concat", "conv2d", "interp_upsample",
    "msa_layer", "pixel_shuffle", "pixel_unshuffle", "pool2d", "record", "relu", "scale",
    "sgd_adam_step", "sigmoid", "sigmoid_focal_loss", "tensor_mean", "tensor_sum", "track",
    "transposed_conv2d",
]
