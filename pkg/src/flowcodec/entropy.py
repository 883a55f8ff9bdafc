"""Discrete likelihood models and integer CDF tables for range coding.

Three pmf families feed both the training rate term and the coder tables:

  * Gaussian convolved with unit uniform, for mean/scale-conditioned latents,
  * a K-component Gaussian mixture convolved with unit uniform,
  * a learned per-channel factorized prior (monotone CDF network) for the
    hyper latent.

All pmfs are evaluated as CDF differences across the +-0.5 integer bin edges.
For rate computation likelihoods are clamped at ``LIKELIHOOD_FLOOR`` and
scales at ``SCALE_FLOOR`` so rates stay finite.

Table construction (:func:`build_cdf_table`) converts a float64 pmf into a
fixed-point cumulative table: every bucket, including the two tail-escape
buckets, gets at least one count, and the total is exactly ``2**precision``.
Everything after the float64 pmf is integer arithmetic, so identical inputs
produce identical tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import ndtr
from torch import nn

from .ops import lower_bound

SCALE_FLOOR = 1e-6
LIKELIHOOD_FLOOR = 2.0 ** -24
DEFAULT_PRECISION = 16
_LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Continuous-relaxation pmfs (torch, differentiable)
# ---------------------------------------------------------------------------

def _std_normal_cdf(x):
    # erfc maximizes precision in the tails.
    return 0.5 * torch.erfc(-(2 ** -0.5) * x)


def gauss_uniform_pmf(v, mu, sigma):
    """Probability of bin ``v`` under N(mu, sigma^2) convolved with U(-.5, .5).

    ``v`` may be integer-valued (true discrete probability) or a noisy
    continuous surrogate during training. Broadcasting applies.
    """
    sigma = lower_bound(sigma, SCALE_FLOOR)
    dist = torch.abs(v - mu)
    upper = _std_normal_cdf((0.5 - dist) / sigma)
    lower = _std_normal_cdf((-0.5 - dist) / sigma)
    return upper - lower


@dataclass
class DistributionParams:
    """Per-element mixture parameters with the component axis at dim 1.

    Shapes are ``(B, K, C, H, W)``; ``weights`` lie on the probability
    simplex over dim 1 and ``scales`` are floored at ``SCALE_FLOOR``.
    """

    weights: torch.Tensor
    means: torch.Tensor
    scales: torch.Tensor

    @property
    def num_components(self):
        return self.weights.shape[1]

    def validate(self, atol=1e-6):
        if not (self.weights.shape == self.means.shape == self.scales.shape):
            raise ValueError("mismatched parameter shapes")
        wsum = self.weights.sum(dim=1)
        if not torch.allclose(wsum, torch.ones_like(wsum), atol=atol):
            raise ValueError("mixture weights do not sum to 1")
        if float(self.scales.detach().min()) < SCALE_FLOOR * (1 - 1e-9):
            raise ValueError("scale below floor")


def gmm_uniform_pmf(v, params: DistributionParams):
    """Mixture-of-Gaussians convolved with unit uniform, evaluated at ``v``."""
    comps = gauss_uniform_pmf(v.unsqueeze(1), params.means, params.scales)
    return (params.weights * comps).sum(dim=1)


def x2_prior_logp(x2, sigma0):
    """Log-density of the zero-mean Gaussian reference prior on the residual
    image branch. Reporting only; the training objective uses the squared-norm
    surrogate instead."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    n = x2.numel()
    quad = float((x2.double() ** 2).sum()) / (2.0 * sigma0 ** 2)
    return -quad - 0.5 * n * math.log(2.0 * math.pi * sigma0 ** 2)


def rate_nats(*likelihoods):
    """Total code length in nats, with the documented likelihood clamp."""
    total = None
    for lik in likelihoods:
        term = -torch.log(lower_bound(lik, LIKELIHOOD_FLOOR)).sum()
        total = term if total is None else total + term
    return total


def rate_bits(*likelihoods):
    # The single nats-to-bits conversion site.
    return rate_nats(*likelihoods) / _LN2


# ---------------------------------------------------------------------------
# Learned factorized prior
# ---------------------------------------------------------------------------

class FactorizedPrior(nn.Module):
    """Per-channel learned monotone CDF for the hyper latent.

    Each channel owns a stack of 1-D affine layers with nonnegative
    (softplus-reparameterized) weights and bounded tanh gates, ending in a
    sigmoid; the construction is monotone nondecreasing in its input and maps
    the real line onto (0, 1). Widths ``(3, 3, 3)`` give the four-layer
    1 -> 3 -> 3 -> 3 -> 1 network.
    """

    def __init__(self, channels, widths=(3, 3, 3), init_scale=10.0):
        super().__init__()
        self.channels = channels
        filters = (1,) + tuple(widths) + (1,)
        scale = init_scale ** (1.0 / (len(filters) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for i in range(len(filters) - 1):
            mat = torch.full(
                (channels, filters[i + 1], filters[i]),
                math.log(math.expm1(1.0 / scale / filters[i + 1])),
            )
            self._matrices.append(nn.Parameter(mat))
            bias = torch.empty(channels, filters[i + 1], 1).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if i < len(filters) - 2:
                self._gates.append(nn.Parameter(torch.zeros(channels, filters[i + 1], 1)))

    def _logits(self, x):
        # x: (channels, 1, n) -> (channels, 1, n)
        for i, matrix in enumerate(self._matrices):
            x = torch.nn.functional.softplus(matrix) @ x + self._biases[i]
            if i < len(self._gates):
                x = x + torch.tanh(self._gates[i]) * torch.tanh(x)
        return x

    def cdf(self, x):
        """Monotone CDF evaluated elementwise; ``x`` shaped (channels, n)."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def _pmf_between(self, lower_logits, upper_logits):
        sign = -torch.sign(lower_logits + upper_logits).detach()
        return torch.abs(torch.sigmoid(sign * upper_logits) - torch.sigmoid(sign * lower_logits))

    def likelihood(self, x):
        """Bin probabilities for a (B, C, H, W) tensor, evaluated per channel."""
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        flat = x.transpose(0, 1).reshape(c, 1, -1)
        pmf = self._pmf_between(self._logits(flat - 0.5), self._logits(flat + 0.5))
        return pmf.reshape(c, b, h, w).transpose(0, 1)

    @torch.no_grad()
    def support_bounds(self, tail_mass=2.0 ** -16, max_abs=8192):
        """Smallest per-channel integer interval holding all but ``tail_mass``.

        Derived from the learned CDF alone, so encoder and decoder compute
        identical bounds without side information.
        """
        bound = 32
        while True:
            edges = torch.tensor([-bound - 0.5, bound + 0.5]).repeat(self.channels, 1)
            cdf = self.cdf(edges.to(next(self.parameters()).dtype))
            if (float(cdf[:, 0].max()) <= tail_mass and float(cdf[:, 1].min()) >= 1 - tail_mass) or bound >= max_abs:
                break
            bound *= 2
        grid = torch.arange(-bound, bound + 1, dtype=torch.float32) - 0.5
        edges = grid.unsqueeze(0).repeat(self.channels, 1)
        cdf = self.cdf(edges.to(next(self.parameters()).dtype)).cpu().numpy().astype(np.float64)
        lo = np.argmax(cdf > tail_mass, axis=1) - 1 - bound
        tail_hi = cdf < 1 - tail_mass
        hi = cdf.shape[1] - 1 - np.argmax(tail_hi[:, ::-1], axis=1) - bound
        lo = np.maximum(np.minimum(lo, 0), -bound)
        hi = np.minimum(np.maximum(hi, 0), bound)
        return lo.astype(np.int64), hi.astype(np.int64)

    @torch.no_grad()
    def cdf_tables(self, precision=DEFAULT_PRECISION, tail_mass=2.0 ** -16):
        """One :class:`CdfTable` per channel, rebuilt deterministically."""
        lo, hi = self.support_bounds(tail_mass=tail_mass)
        widths = hi - lo + 1
        wmax = int(widths.max())
        dtype = next(self.parameters()).dtype
        offsets = torch.arange(wmax + 1, dtype=dtype)
        edges = torch.as_tensor(lo, dtype=dtype).unsqueeze(1) + offsets.unsqueeze(0) - 0.5
        cdf = self.cdf(edges).cpu().numpy().astype(np.float64)
        tables = []
        for c in range(self.channels):
            w = int(widths[c])
            chan = cdf[c, : w + 1]
            pmf = np.diff(chan)
            tables.append(
                build_cdf_table(
                    pmf,
                    int(lo[c]),
                    precision=precision,
                    tail_lo=float(chan[0]),
                    tail_hi=float(1.0 - chan[w]),
                )
            )
        return tables


# ---------------------------------------------------------------------------
# Fixed-point CDF tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CdfTable:
    """Integer cumulative table over ``[support_min, support_max]`` plus two
    tail-escape buckets (indices 0 and last)."""

    support_min: int
    support_max: int
    quantized_cdf: np.ndarray = field(repr=False)
    precision: int = DEFAULT_PRECISION

    def __post_init__(self):
        n = self.support_max - self.support_min + 1
        cdf = self.quantized_cdf
        if n < 1 or len(cdf) != n + 3:
            raise ValueError("table length inconsistent with support")
        if cdf[0] != 0 or int(cdf[-1]) != (1 << self.precision):
            raise ValueError("cdf endpoints invalid")
        if int(np.diff(cdf.astype(np.int64)).min()) < 1:
            raise ValueError("cdf must be strictly increasing")

    @property
    def counts(self):
        return np.diff(self.quantized_cdf.astype(np.int64))


def build_cdf_table(pmf, support_min, precision=DEFAULT_PRECISION, tail_lo=0.0, tail_hi=0.0):
    """Quantize a pmf over consecutive integers into a :class:`CdfTable`.

    ``pmf`` holds float64 probabilities of the integers starting at
    ``support_min``; ``tail_lo``/``tail_hi`` are the masses assigned to the
    two escape buckets. Quantization is largest-remainder allocation of
    ``2**precision`` counts followed by deterministic stealing from the
    largest buckets so every bucket keeps at least one count.
    """
    if not 8 <= precision <= 16:
        raise ValueError("precision must lie in [8, 16]")
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ValueError("pmf must be a non-empty 1-D array")
    probs = np.concatenate(([max(tail_lo, 0.0)], np.clip(pmf, 0.0, None), [max(tail_hi, 0.0)]))
    total = 1 << precision
    if probs.size > total:
        raise ValueError(f"support of {probs.size} buckets too large for precision {precision}")
    mass = probs.sum()
    if not np.isfinite(mass) or mass <= 0.0:
        probs = np.ones_like(probs)
        mass = float(probs.sum())
    scaled = probs * (total / mass)
    counts = np.floor(scaled).astype(np.int64)
    remainder = scaled - counts
    deficit = total - int(counts.sum())
    if deficit > 0:
        order = np.argsort(-remainder, kind="stable")
        counts[order[:deficit]] += 1
    elif deficit < 0:
        order = np.argsort(-counts, kind="stable")
        for i in order:
            take = min(-deficit, int(counts[i]) - 1)
            counts[i] -= take
            deficit += take
            if deficit == 0:
                break
    zeros = counts == 0
    need = int(zeros.sum())
    if need:
        counts[zeros] = 1
        order = np.argsort(-counts, kind="stable")
        while need:
            progress = False
            for i in order:
                if need == 0:
                    break
                if counts[i] > 1:
                    counts[i] -= 1
                    need -= 1
                    progress = True
            if not progress:
                raise ValueError("cannot give every bucket a positive count at this precision")
    cdf = np.zeros(len(counts) + 1, dtype=np.uint32)
    cdf[1:] = np.cumsum(counts).astype(np.uint32)
    return CdfTable(
        support_min=int(support_min),
        support_max=int(support_min) + len(pmf) - 1,
        quantized_cdf=cdf,
        precision=precision,
    )


def table_kl_bits(pmf, table, tail_lo=0.0, tail_hi=0.0):
    """KL(true || quantized) in bits, for table-accuracy checks."""
    probs = np.concatenate(([tail_lo], np.asarray(pmf, dtype=np.float64), [tail_hi]))
    q = table.counts / float(1 << table.precision)
    mask = probs > 0
    return float(np.sum(probs[mask] * np.log2(probs[mask] / q[mask])))


# ---------------------------------------------------------------------------
# Table builders for coder-side models (numpy, float64)
# ---------------------------------------------------------------------------

def mixture_cdf_tables(
    weights,
    means,
    scales,
    precision=DEFAULT_PRECISION,
    spread=12.0,
    margin=2,
    max_len=4096,
):
    """Per-channel tables for a batch of mixture distributions.

    ``weights``/``means``/``scales`` are float64 arrays of shape (C, K). The
    integer support of channel ``c`` covers all components out to ``spread``
    standard deviations plus ``margin``, capped at ``max_len`` buckets; mass
    outside the support goes to the escape buckets.
    """
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    lo = np.floor((means - spread * scales).min(axis=1)).astype(np.int64) - margin
    hi = np.ceil((means + spread * scales).max(axis=1)).astype(np.int64) + margin
    width = hi - lo + 1
    over = width > max_len
    if over.any():
        center = np.rint((weights * means).sum(axis=1)).astype(np.int64)
        lo = np.where(over, center - max_len // 2, lo)
        hi = np.where(over, lo + max_len - 1, hi)
        width = hi - lo + 1
    wmax = int(width.max())
    # One vectorized CDF evaluation on a shared grid, sliced per channel.
    edges = lo[:, None] + np.arange(wmax + 1)[None, :] - 0.5
    z = (edges[:, None, :] - means[:, :, None]) / scales[:, :, None]
    cdf = np.einsum("ck,ckw->cw", weights, ndtr(z))
    tables = []
    for c in range(weights.shape[0]):
        w = int(width[c])
        chan = cdf[c, : w + 1]
        pmf = np.diff(chan)
        tables.append(
            build_cdf_table(
                pmf,
                int(lo[c]),
                precision=precision,
                tail_lo=float(chan[0]),
                tail_hi=float(1.0 - chan[w]),
            )
        )
    return tables
