"""Additive autoencoding transforms and their composition.

The pipeline threads an augmented state of three branches: the image-shaped
x branch, the latent z branch, and the hyper h branch. Every step updates
exactly one branch by adding (encode) or subtracting (decode) a network
output of the other branch, so each step is exactly invertible and the whole
composition is volume preserving: the Jacobian log-determinant is zero by
construction.

Forward composition for S steps (the last step wraps the hyper transform
between its encode and decode halves):

    for i < S:   z += enc_i(x);  x -= dec_i(z)
    last step:   z += enc_S(x)
                 h  = quantize(hyper_enc(z) [+ e_h])
                 z  = quantize(z - hyper_mean(h))     # mean-subtract mode
                 z  = quantize(z)                     # mixture mode
                 x -= dec_S(z)

The inverse replays the same updates in reverse order; with quantization
disabled and the true final x branch retained it reconstructs the input
exactly up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .ops import quantize

DIVISIBILITY = 64


@dataclass
class FlowConfig:
    """Structural hyperparameters of the flow."""

    num_steps: int = 2
    width: int = 128
    latent_channels: int = 320
    hyper_channels: int = 192

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if min(self.width, self.latent_channels, self.hyper_channels) < 1:
            raise ValueError("channel counts must be >= 1")


@dataclass
class AugmentedState:
    """The (x, z, h) branch triple threaded through the pipeline."""

    x: torch.Tensor  # (B, 3, H, W)
    z: torch.Tensor  # (B, N, H/16, W/16)
    h: torch.Tensor  # (B, M, H/64, W/64)

    @classmethod
    def for_image(cls, x, cfg: FlowConfig):
        """Zero-initialized z/h branches for an image batch.

        The branch shapes are fixed functions of the image size; creation
        fails when H or W is not divisible by the flow's total downsampling.
        """
        b, c, h, w = x.shape
        if h % DIVISIBILITY or w % DIVISIBILITY:
            raise ValueError(f"image dims {h}x{w} not divisible by {DIVISIBILITY}")
        z = x.new_zeros(b, cfg.latent_channels, h // 16, w // 16)
        eh = x.new_zeros(b, cfg.hyper_channels, h // 64, w // 64)
        return cls(x=x, z=z, h=eh)

    def clone(self):
        return AugmentedState(self.x.clone(), self.z.clone(), self.h.clone())


class CouplingPair(nn.Module):
    """One autoencoding transform: an encode net mapping the x branch to the
    z branch's shape and a decode net mapping back. The two nets never share
    parameters."""

    def __init__(self, enc_net, dec_net):
        super().__init__()
        self.enc_net = enc_net
        self.dec_net = dec_net


def _check_like(update, target, branch):
    if update.shape != target.shape:
        raise ValueError(f"{branch}-branch update shape {tuple(update.shape)} != {tuple(target.shape)}")


def encode_step(state: AugmentedState, pair: CouplingPair, cond=None) -> AugmentedState:
    """z <- z + enc(x); the x branch is untouched."""
    update = pair.enc_net(state.x, cond)
    _check_like(update, state.z, "z")
    return AugmentedState(x=state.x, z=state.z + update, h=state.h)


def decode_step(state: AugmentedState, pair: CouplingPair, cond=None) -> AugmentedState:
    """x <- x - dec(z); the z branch is untouched."""
    update = pair.dec_net(state.z, cond)
    _check_like(update, state.x, "x")
    return AugmentedState(x=state.x - update, z=state.z, h=state.h)


def invert_step(state: AugmentedState, pair: CouplingPair, which, cond=None) -> AugmentedState:
    """Exact algebraic inverse of one half-step.

    ``which`` selects the half to invert: ``"enc"`` undoes the z update by
    subtraction, ``"dec"`` undoes the x update by addition.
    """
    if which == "enc":
        update = pair.enc_net(state.x, cond)
        _check_like(update, state.z, "z")
        return AugmentedState(x=state.x, z=state.z - update, h=state.h)
    if which == "dec":
        update = pair.dec_net(state.z, cond)
        _check_like(update, state.x, "x")
        return AugmentedState(x=state.x + update, z=state.z, h=state.h)
    raise ValueError(f"which must be 'enc' or 'dec', got {which!r}")


def log_det(cfg: FlowConfig) -> float:
    """Jacobian log-determinant of the full pipeline.

    Additive couplings update one branch by a function of the others, so the
    Jacobian is unit triangular and its determinant is exactly 1; the
    likelihood objective therefore reduces to the prior term alone.
    """
    return 0.0


def hyper_encode(z, e_h, hyper, quant_mode, z_noise=None, cond=None):
    """Quantize the hyper pair: returns (h_hat, z_hat).

    The hyper latent takes the additive augmentation ``e_h`` (the noise
    sample during training; pass zeros with quantization disabled) or
    nearest-integer rounding in ``"round"`` mode. The main latent is
    mean-subtracted before quantization when the hyper transform predicts a
    mean, and quantized unchanged in mixture mode.
    """
    h_raw = hyper.enc(z, cond)
    if quant_mode in (None, "none", "noise"):
        h_hat = h_raw if e_h is None else h_raw + e_h
    else:
        h_hat = quantize(h_raw, quant_mode)
    if hyper.mean_subtract:
        z = z - hyper.dec_mean(h_hat, cond)
    z_hat = quantize(z, quant_mode, noise=z_noise)
    return h_hat, z_hat


def forward_pipeline(x, e_h, cfg, couplings, hyper, quant_mode, z_noise=None, cond=None) -> AugmentedState:
    """Run the encode-side flow and return the final state.

    ``e_h`` is the additive hyper-branch augmentation: in ``"noise"`` mode it
    carries the quantization noise sample; with quantization disabled it is
    added as-is (pass zeros for a clean pass); in ``"round"`` mode it is
    replaced by nearest-integer rounding. ``z_noise`` optionally freezes the
    z-branch quantization noise for reproducible gradient checks.
    """
    state = AugmentedState.for_image(x, cfg)
    if e_h is not None:
        _check_like(e_h, state.h, "h")
    for pair in couplings[:-1]:
        state = encode_step(state, pair, cond)
        state = decode_step(state, pair, cond)
    last = couplings[-1]
    state = encode_step(state, last, cond)
    h_hat, z_hat = hyper_encode(state.z, e_h, hyper, quant_mode, z_noise, cond)
    state = AugmentedState(x=state.x, z=z_hat, h=h_hat)
    return decode_step(state, last, cond)


def inverse_pipeline(state: AugmentedState, couplings, hyper, cond=None) -> torch.Tensor:
    """Run the decode-side flow from (x2, z_hat, h_hat) back to an image.

    The x branch of ``state`` holds zeros in normal operation, the decoded
    residual in residual mode, or the true final x branch when checking
    invertibility. Returns the reconstruction before quality enhancement.
    """
    last = couplings[-1]
    st = invert_step(state, last, "dec", cond)
    z = st.z
    if hyper.mean_subtract:
        z = z + hyper.dec_mean(state.h, cond)
    st = AugmentedState(x=st.x, z=z, h=st.h)
    st = invert_step(st, last, "enc", cond)
    earlier = couplings[:-1]
    for j, pair in enumerate(reversed(earlier)):
        st = invert_step(st, pair, "dec", cond)
        if j < len(earlier) - 1:
            # The z branch is only needed by the next (earlier) pair.
            st = invert_step(st, pair, "enc", cond)
    return st.x
