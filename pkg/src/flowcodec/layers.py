"""Network building blocks: GDN, masked and rate-conditional convolutions,
coupling transform networks, the mixture parameter head, and the quality
enhancement network.

Every block takes ``forward(x, cond=None)`` where ``cond`` is the embedding
vector of the active rate point; plain (non-conditional) layers ignore it.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .ops import lower_bound

GDN_BETA_FLOOR = 1e-6


class GDN(nn.Module):
    """Generalized divisive normalization, channelwise.

    ``y_c = x_c / sqrt(beta_c + sum_d gamma_cd * x_d^2)``; the inverse form
    multiplies instead of dividing. Parameters are stored directly and
    floored through a one-sided straight-through bound, so ``beta = 1``,
    ``gamma = 0`` is representable exactly (making the unit-denominator case
    a true identity).
    """

    def __init__(self, channels, inverse=False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(0.1 * torch.eye(channels))

    def forward(self, x, cond=None):
        c = x.shape[1]
        beta = lower_bound(self.beta, GDN_BETA_FLOOR)
        gamma = lower_bound(self.gamma, 0.0).view(c, c, 1, 1)
        norm = F.conv2d(x * x, gamma, beta)
        if self.inverse:
            return x * torch.sqrt(norm)
        return x * torch.rsqrt(norm)


class MaskedConv2d(nn.Conv2d):
    """2-D convolution with a raster-order causal mask (PixelCNN type A).

    The mask zeroes the center tap and everything after it, so the output at
    a spatial position depends only on strictly preceding positions. The mask
    multiplies the weight functionally, keeping gradients masked as well.
    """

    def __init__(self, in_channels, out_channels, kernel_size, **kwargs):
        super().__init__(in_channels, out_channels, kernel_size, **kwargs)
        mask = torch.ones_like(self.weight)
        _, _, h, w = mask.shape
        mask[:, :, h // 2, w // 2 :] = 0
        mask[:, :, h // 2 + 1 :, :] = 0
        self.register_buffer("mask", mask)

    def forward(self, x, cond=None):
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class ConditionalAffine(nn.Module):
    """Per-channel (scale, bias) from a rate-point embedding.

    Two fully connected layers produce the affine pair; the scale goes
    through a softplus normalized by softplus(0), so the zero-initialized
    final layer yields exactly scale 1 and bias 0 (an identity wrapper).
    """

    def __init__(self, embed_dim, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embed_dim, embed_dim),
            nn.ReLU(inplace=True),
            nn.Linear(embed_dim, 2 * channels),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, y, cond):
        raw = self.net(cond)
        scale_raw, bias = raw.chunk(2, dim=-1)
        scale = F.softplus(scale_raw) / F.softplus(scale_raw.new_zeros(()))
        return y * scale.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)


class ConditionalConv2d(nn.Module):
    """Convolution optionally followed by a rate-conditional affine.

    With ``embed_dim=None`` this is a plain convolution that ignores
    ``cond``; with an embedding dimension the affine is applied and ``cond``
    becomes mandatory.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, transpose=False, embed_dim=None):
        super().__init__()
        pad = kernel_size // 2
        if transpose:
            self.conv = nn.ConvTranspose2d(
                in_channels, out_channels, kernel_size, stride=stride, padding=pad, output_padding=stride - 1
            )
        else:
            self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=pad)
        self.affine = ConditionalAffine(embed_dim, out_channels) if embed_dim else None

    def forward(self, x, cond=None):
        y = self.conv(x)
        if self.affine is not None:
            if cond is None:
                raise ValueError("conditional convolution requires a rate condition")
            y = self.affine(y, cond)
        return y


class _PassThrough(nn.Module):
    def forward(self, x, cond=None):
        return x


class AnalysisTransform(nn.Module):
    """Image-shaped input to latent-shaped output; four stride-2 stages with
    GDN between them (x16 spatial reduction)."""

    def __init__(self, in_channels, width, out_channels, embed_dim=None, use_gdn=True):
        super().__init__()

        def norm():
            return GDN(width) if use_gdn else _PassThrough()

        self.stages = nn.ModuleList(
            [
                ConditionalConv2d(in_channels, width, 5, stride=2, embed_dim=embed_dim),
                norm(),
                ConditionalConv2d(width, width, 5, stride=2, embed_dim=embed_dim),
                norm(),
                ConditionalConv2d(width, width, 5, stride=2, embed_dim=embed_dim),
                norm(),
                ConditionalConv2d(width, out_channels, 5, stride=2, embed_dim=embed_dim),
            ]
        )

    def forward(self, x, cond=None):
        if x.shape[-2] % 16 or x.shape[-1] % 16:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by 16")
        for stage in self.stages:
            x = stage(x, cond)
        return x


class SynthesisTransform(nn.Module):
    """Latent-shaped input back to image shape (x16 upsampling), mirroring
    the analysis transform with inverse GDN.

    With ``scale_head=True`` a parallel final stage predicts per-element
    log-scales for the residual-branch conditional Gaussian. Its input is
    detached: the head learns the residual statistics without feeding
    gradients back into the synthesis trunk.
    """

    def __init__(self, in_channels, width, out_channels, embed_dim=None, scale_head=False, use_gdn=True):
        super().__init__()

        def norm():
            return GDN(width, inverse=True) if use_gdn else _PassThrough()

        self.stages = nn.ModuleList(
            [
                ConditionalConv2d(in_channels, width, 5, stride=2, transpose=True, embed_dim=embed_dim),
                norm(),
                ConditionalConv2d(width, width, 5, stride=2, transpose=True, embed_dim=embed_dim),
                norm(),
                ConditionalConv2d(width, width, 5, stride=2, transpose=True, embed_dim=embed_dim),
                norm(),
            ]
        )
        self.final = ConditionalConv2d(width, out_channels, 5, stride=2, transpose=True, embed_dim=embed_dim)
        self.scale_head = None
        if scale_head:
            self.scale_head = ConditionalConv2d(width, out_channels, 5, stride=2, transpose=True, embed_dim=embed_dim)

    def forward(self, z, cond=None, return_scale=False):
        h = z
        for stage in self.stages:
            h = stage(h, cond)
        mu = self.final(h, cond)
        if not return_scale:
            return mu
        if self.scale_head is None:
            raise ValueError("synthesis transform was built without a scale head")
        log_scale = self.scale_head(h.detach(), cond)
        return mu, log_scale


class HyperAnalysis(nn.Module):
    """Latent to hyper latent (x4 spatial reduction), absolute-value front."""

    def __init__(self, in_channels, hyper_channels, embed_dim=None):
        super().__init__()
        self.stages = nn.ModuleList(
            [
                ConditionalConv2d(in_channels, hyper_channels, 3, embed_dim=embed_dim),
                ConditionalConv2d(hyper_channels, hyper_channels, 5, stride=2, embed_dim=embed_dim),
                ConditionalConv2d(hyper_channels, hyper_channels, 5, stride=2, embed_dim=embed_dim),
            ]
        )

    def forward(self, z, cond=None):
        if z.shape[-2] % 4 or z.shape[-1] % 4:
            raise ValueError(f"latent dims {tuple(z.shape[-2:])} not divisible by 4")
        h = torch.abs(z)
        h = F.relu(self.stages[0](h, cond), inplace=True)
        h = F.relu(self.stages[1](h, cond), inplace=True)
        return self.stages[2](h, cond)


class HyperSynthesis(nn.Module):
    """Hyper latent to latent-resolution output (x4 upsampling)."""

    def __init__(self, hyper_channels, out_channels, embed_dim=None):
        super().__init__()
        self.stages = nn.ModuleList(
            [
                ConditionalConv2d(hyper_channels, hyper_channels, 5, stride=2, transpose=True, embed_dim=embed_dim),
                ConditionalConv2d(hyper_channels, out_channels, 5, stride=2, transpose=True, embed_dim=embed_dim),
                ConditionalConv2d(out_channels, out_channels, 3, embed_dim=embed_dim),
            ]
        )

    def forward(self, h, cond=None):
        h = F.relu(self.stages[0](h, cond), inplace=True)
        h = F.relu(self.stages[1](h, cond), inplace=True)
        return self.stages[2](h, cond)


class ContextModel(nn.Module):
    """Single 5x5 masked convolution over the quantized latent."""

    def __init__(self, channels, out_channels):
        super().__init__()
        self.conv = MaskedConv2d(channels, out_channels, 5, padding=2)

    def forward(self, z_hat, cond=None):
        return self.conv(z_hat)


class MixtureParamHead(nn.Module):
    """Fuses causal context features with hyper features through three 1x1
    layers, emitting ``3 * K * C`` raw mixture parameter channels."""

    def __init__(self, in_channels, latent_channels, num_components, embed_dim=None):
        super().__init__()
        out = 3 * num_components * latent_channels
        self.stages = nn.ModuleList(
            [
                ConditionalConv2d(in_channels, out, 1, embed_dim=embed_dim),
                ConditionalConv2d(out, out, 1, embed_dim=embed_dim),
                ConditionalConv2d(out, out, 1, embed_dim=embed_dim),
            ]
        )

    def forward(self, features, cond=None):
        h = F.leaky_relu(self.stages[0](features, cond), inplace=True)
        h = F.leaky_relu(self.stages[1](h, cond), inplace=True)
        return self.stages[2](h, cond)


class _ResidualBlock(nn.Module):
    def __init__(self, width, embed_dim=None):
        super().__init__()
        self.c1 = ConditionalConv2d(width, width, 3, embed_dim=embed_dim)
        self.c2 = ConditionalConv2d(width, width, 3, embed_dim=embed_dim)

    def forward(self, x, cond=None):
        h = F.relu(self.c1(x, cond), inplace=True)
        return x + self.c2(h, cond)


class QENet(nn.Module):
    """Stride-free residual refinement applied after the inverse flow.

    Three residual blocks at fixed width with a global skip; the final
    convolution is zero-initialized so a fresh network is an exact identity.
    """

    def __init__(self, channels=3, width=64, num_blocks=3, embed_dim=None):
        super().__init__()
        self.head = ConditionalConv2d(channels, width, 3, embed_dim=embed_dim)
        self.blocks = nn.ModuleList([_ResidualBlock(width, embed_dim=embed_dim) for _ in range(num_blocks)])
        self.tail = ConditionalConv2d(width, channels, 3, embed_dim=embed_dim)
        nn.init.zeros_(self.tail.conv.weight)
        nn.init.zeros_(self.tail.conv.bias)

    def forward(self, x, cond=None):
        h = F.relu(self.head(x, cond), inplace=True)
        for block in self.blocks:
            h = block(h, cond)
        return x + self.tail(h, cond)
