"""Normalizing flows built on single-pass invertible padded convolutions."""

from .core import DEFAULT_DTYPE, PadSpec, PadflowError, ShapeError, flat_index, pad
from .invconv import (
    ConvKernel,
    InvConvParams,
    SingularKernelError,
    conv_forward,
    conv_inverse,
    conv_logdet,
    extract_params,
    is_invertible,
    reconstruct_kernel,
)
from .model import FlowModel, ModelConfig, bits_per_dim, load_model, save_model

__all__ = [
    "DEFAULT_DTYPE",
    "PadSpec",
    "PadflowError",
    "ShapeError",
    "flat_index",
    "pad",
    "ConvKernel",
    "InvConvParams",
    "SingularKernelError",
    "conv_forward",
    "conv_inverse",
    "conv_logdet",
    "extract_params",
    "is_invertible",
    "reconstruct_kernel",
    "FlowModel",
    "ModelConfig",
    "bits_per_dim",
    "load_model",
    "save_model",
]

__version__ = "0.1.0"
