"""Small tensor ops shared across modules."""

from __future__ import annotations

import torch


class _LowerBoundFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp_min(x, bound)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        # Pass the gradient through clamped elements only when it pushes the
        # value back above the bound; this keeps floored parameters trainable.
        pass_through = (x >= ctx.bound) | (grad_output < 0)
        return grad_output * pass_through, None


def lower_bound(x, bound):
    """Differentiable ``max(x, bound)`` with a one-sided straight-through grad."""
    return _LowerBoundFn.apply(x, float(bound))


def quantize(x, mode, noise=None):
    """Quantize (or simulate quantizing) a tensor.

    Modes: ``None`` passes through, ``"noise"`` adds uniform(-0.5, 0.5) noise
    (``noise`` overrides the sample, e.g. for frozen-noise gradient checks),
    ``"round"`` rounds to the nearest integer, ``"ste_round"`` rounds with a
    straight-through gradient.
    """
    if mode is None or mode == "none":
        return x
    if mode == "noise":
        if noise is None:
            noise = torch.empty_like(x).uniform_(-0.5, 0.5)
        return x + noise
    if mode == "round":
        return torch.round(x)
    if mode == "ste_round":
        return x + (torch.round(x) - x).detach()
    raise ValueError(f"unknown quantization mode: {mode!r}")
