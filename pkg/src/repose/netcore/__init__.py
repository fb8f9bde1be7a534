"""Minimal differentiable compute substrate for the RePose network."""
from . import checkpoint, kernels, ops
from .gradcheck import GradCheckError, grad_check
from .layers import ConvBlock, ConvBlockSpec, ParamStore, conv_block
from .ops import bilinear_resize, concat_channels, residual_mix
from .optim import Adam, lr_at
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "Adam",
    "ConvBlock",
    "ConvBlockSpec",
    "GradCheckError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "bilinear_resize",
    "checkpoint",
    "concat_channels",
    "conv_block",
    "grad_check",
    "kernels",
    "lr_at",
    "no_grad",
    "ops",
    "residual_mix",
]
