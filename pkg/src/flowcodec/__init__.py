"""Invertible additive-flow image codec.

A stack of additive autoencoding transforms with a hierarchical hyperprior
maps an image to a compact coded latent pair plus a near-zero residual
branch; quantized latents are entropy coded to a real bitstream with an
autoregressive Gaussian-mixture model and decoded by running the flow in
reverse, followed by a light quality-enhancement network.
"""

from .codec import BitstreamContainer, CodecError, decode_image, encode_image
from .flow import AugmentedState, CouplingPair, FlowConfig, forward_pipeline, inverse_pipeline
from .metrics import RDRecord, bd_rate, msssim, psnr_rgb
from .model import CodecModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AugmentedState",
    "BitstreamContainer",
    "CodecError",
    "CodecModel",
    "CouplingPair",
    "FlowConfig",
    "ModelConfig",
    "RDRecord",
    "TrainConfig",
    "bd_rate",
    "decode_image",
    "encode_image",
    "forward_pipeline",
    "inverse_pipeline",
    "load_checkpoint",
    "msssim",
    "psnr_rgb",
    "save_checkpoint",
    "train",
]
