"""Minimal dense layers, losses, ADAM and gradient checking."""
from .checkpoint import load_checkpoint, save_checkpoint, validate_shapes
from .gradcheck import grad_check, numeric_gradient, relative_error
from .layers import (Conv3x3, Dense, Layer, MaxPool2x2, Param, ReLU, Sequential, Softmax,
                     default_dtype, float64_mode, glorot_uniform, mlp)
from .losses import (binary_cross_entropy_with_logits, l1_loss, log_softmax, sigmoid,
                     softmax, softmax_cross_entropy)
from .optim import adam_step


def layer_forward(layer, x):
    return layer.forward(x)


def layer_backward(layer, x, upstream):
    """Input gradient plus the (accumulated) parameter gradients of ``layer``."""
    dx = layer.backward(x, upstream)
    return dx, {p.name: p.grad for p in layer.params}


__all__ = [
    "Conv3x3", "Dense", "Layer", "MaxPool2x2", "Param", "ReLU", "Sequential", "Softmax",
    "adam_step", "binary_cross_entropy_with_logits", "default_dtype", "float64_mode",
    "glorot_uniform", "grad_check", "l1_loss", "layer_backward", "layer_forward",
    "load_checkpoint", "log_softmax", "mlp", "numeric_gradient", "relative_error",
    "save_checkpoint", "sigmoid", "softmax", "softmax_cross_entropy", "validate_shapes",
]
