"""Model assembly: coupling pairs, hyper transform, entropy heads, quality
enhancement, plus checkpoint archive I/O and the config hash the bitstream
header carries."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import entropy
from .entropy import DistributionParams, FactorizedPrior, gauss_uniform_pmf, gmm_uniform_pmf
from .flow import AugmentedState, CouplingPair, FlowConfig, forward_pipeline, inverse_pipeline
from .layers import (
    AnalysisTransform,
    ContextModel,
    HyperAnalysis,
    HyperSynthesis,
    MixtureParamHead,
    QENet,
    SynthesisTransform,
)
from .ops import lower_bound

CHECKPOINT_FORMAT = 1
ENTROPY_MODES = ("gmm", "gaussian")


@dataclass
class ModelConfig:
    """Everything needed to rebuild a codec model (minus the weights)."""

    num_steps: int = 2
    width: int = 128
    latent_channels: int = 320
    hyper_channels: int = 192
    mixture_components: int = 3
    entropy_mode: str = "gmm"
    residual_head: bool = False
    # Residual-branch quantization bin is 1/residual_scale in pixel units.
    residual_scale: float = 255.0
    # Non-empty enables a single variable-rate model with rate-conditional
    # convolutions over these trade-off values.
    lambda_values: tuple = field(default_factory=tuple)
    embed_dim: int = 32
    # GDN nonlinearities are used inside the coupling networks of every step
    # (not only the first); recorded here as an explicit switch.
    gdn_all_steps: bool = True

    def __post_init__(self):
        self.lambda_values = tuple(float(v) for v in self.lambda_values)
        if self.entropy_mode not in ENTROPY_MODES:
            raise ValueError(f"entropy_mode must be one of {ENTROPY_MODES}")
        if self.mixture_components < 1:
            raise ValueError("mixture_components must be >= 1")

    @property
    def variable_rate(self):
        return len(self.lambda_values) > 0

    @property
    def flow_config(self):
        return FlowConfig(self.num_steps, self.width, self.latent_channels, self.hyper_channels)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, data):
        return cls(**json.loads(data))


class HyperTransform(nn.Module):
    """Hyper-level autoencoding transform and its entropy parameter outputs.

    In "gaussian" mode the synthesis output is chunked into a predicted mean
    (subtracted from the latent before quantization) and per-element scales
    for the zero-mean conditional Gaussian. In "gmm" mode the latent is
    quantized unchanged and the synthesis output is a feature map consumed by
    the mixture parameter head.
    """

    def __init__(self, cfg: ModelConfig, embed_dim=None):
        super().__init__()
        n = cfg.latent_channels
        self.mean_subtract = cfg.entropy_mode == "gaussian"
        self.analysis = HyperAnalysis(n, cfg.hyper_channels, embed_dim=embed_dim)
        self.synthesis = HyperSynthesis(cfg.hyper_channels, 2 * n, embed_dim=embed_dim)

    def enc(self, z, cond=None):
        return self.analysis(z, cond)

    def features(self, h_hat, cond=None):
        return self.synthesis(h_hat, cond)

    def gaussian_params(self, h_hat, cond=None):
        mu, raw_log_sigma = self.synthesis(h_hat, cond).chunk(2, dim=1)
        sigma = lower_bound(torch.exp(raw_log_sigma.clamp(max=20.0)), entropy.SCALE_FLOOR)
        return mu, sigma

    def dec_mean(self, h_hat, cond=None):
        mu, _ = self.synthesis(h_hat, cond).chunk(2, dim=1)
        return mu


@dataclass
class ForwardOutput:
    """Training-side forward pass results."""

    state: AugmentedState
    recon: torch.Tensor
    z_likelihood: torch.Tensor
    h_likelihood: torch.Tensor
    residual_nll: torch.Tensor | None = None


class CodecModel(nn.Module):
    """The full codec: flow, entropy models, and quality enhancement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, w = cfg.latent_channels, cfg.width
        embed = cfg.embed_dim if cfg.variable_rate else None
        pairs = []
        for i in range(cfg.num_steps):
            use_gdn = cfg.gdn_all_steps or i == 0
            last = i == cfg.num_steps - 1
            pairs.append(
                CouplingPair(
                    AnalysisTransform(3, w, n, embed_dim=embed, use_gdn=use_gdn),
                    SynthesisTransform(
                        n, w, 3, embed_dim=embed, scale_head=cfg.residual_head and last, use_gdn=use_gdn
                    ),
                )
            )
        self.couplings = nn.ModuleList(pairs)
        self.hyper = HyperTransform(cfg, embed_dim=embed)
        self.hyper_prior = FactorizedPrior(cfg.hyper_channels)
        if cfg.entropy_mode == "gmm":
            self.context = ContextModel(n, 2 * n)
            self.param_head = MixtureParamHead(4 * n, n, cfg.mixture_components, embed_dim=embed)
        self.qe = QENet(embed_dim=embed)
        if cfg.variable_rate:
            self.lambda_embedding = nn.Embedding(len(cfg.lambda_values), cfg.embed_dim)

    # -- conditioning -----------------------------------------------------

    def condition(self, lambda_index=None):
        """Embedding vector for a rate point; None for fixed-rate models."""
        if not self.cfg.variable_rate:
            if lambda_index is not None:
                raise ValueError("model is not variable-rate; lambda_index must be None")
            return None
        if lambda_index is None or not 0 <= int(lambda_index) < len(self.cfg.lambda_values):
            raise ValueError(f"lambda_index {lambda_index!r} outside the trained set")
        idx = torch.as_tensor(int(lambda_index), device=self.lambda_embedding.weight.device)
        return self.lambda_embedding(idx)

    # -- flow wrappers ----------------------------------------------------

    def flow_forward(self, x, quant_mode, e_h=None, z_noise=None, cond=None):
        if e_h is None and quant_mode in (None, "none", "noise"):
            shape = AugmentedState.for_image(x, self.cfg.flow_config).h.shape
            if quant_mode == "noise":
                e_h = torch.empty(shape, device=x.device, dtype=x.dtype).uniform_(-0.5, 0.5)
            else:
                e_h = torch.zeros(shape, device=x.device, dtype=x.dtype)
        return forward_pipeline(x, e_h, self.cfg.flow_config, self.couplings, self.hyper, quant_mode, z_noise, cond)

    def reconstruct(self, z_hat, h_hat, x2=None, cond=None, enhance=True):
        """Decode-side flow from the coded latents, optionally without QE."""
        if x2 is None:
            b, _, zh, zw = z_hat.shape
            x2 = z_hat.new_zeros(b, 3, zh * 16, zw * 16)
        state = AugmentedState(x=x2, z=z_hat, h=h_hat)
        x_tilde = inverse_pipeline(state, self.couplings, self.hyper, cond)
        return self.qe(x_tilde, cond) if enhance else x_tilde

    # -- entropy glue -----------------------------------------------------

    def mixture_params(self, z_hat, h_hat, cond=None) -> DistributionParams:
        ctx = self.context(z_hat)
        feats = self.hyper.features(h_hat, cond)
        raw = self.param_head(torch.cat([ctx, feats], dim=1), cond)
        return self._raw_to_params(raw)

    def _raw_to_params(self, raw) -> DistributionParams:
        b, _, h, w = raw.shape
        k, n = self.cfg.mixture_components, self.cfg.latent_channels
        raw_w, raw_mu, raw_log_s = raw.chunk(3, dim=1)
        shape = (b, k, n, h, w)
        weights = torch.softmax(raw_w.view(shape), dim=1)
        means = raw_mu.view(shape)
        scales = lower_bound(torch.exp(raw_log_s.view(shape).clamp(max=20.0)), entropy.SCALE_FLOOR)
        return DistributionParams(weights=weights, means=means, scales=scales)

    def latent_likelihoods(self, state: AugmentedState, cond=None):
        """(z, h) bin probabilities of the coded branches of ``state``."""
        h_lik = self.hyper_prior.likelihood(state.h)
        if self.cfg.entropy_mode == "gmm":
            z_lik = gmm_uniform_pmf(state.z, self.mixture_params(state.z, state.h, cond))
        else:
            _, sigma = self.hyper.gaussian_params(state.h, cond)
            z_lik = gauss_uniform_pmf(state.z, torch.zeros_like(state.z), sigma)
        return z_lik, h_lik

    def residual_scales(self, z_hat, cond=None):
        """Coding scales (in symbol units) for the residual x branch."""
        if not self.cfg.residual_head:
            raise ValueError("model was built without the residual scale head")
        _, raw = self.couplings[-1].dec_net(z_hat, cond, return_scale=True)
        return lower_bound(torch.exp(raw.clamp(max=20.0)), entropy.SCALE_FLOOR)

    # -- training forward -------------------------------------------------

    def forward(self, x, quant_mode="noise", lambda_index=None, keep_x2=False) -> ForwardOutput:
        """Training forward pass.

        ``keep_x2=True`` reconstructs through a noise-quantized residual
        branch instead of zeros, exposing the enhancement network to the
        residual-transmission decode path during training.
        """
        cond = self.condition(lambda_index)
        state = self.flow_forward(x, quant_mode, cond=cond)
        z_lik, h_lik = self.latent_likelihoods(state, cond)
        x2_recon = None
        if keep_x2:
            noise = torch.rand_like(state.x) - 0.5
            x2_recon = state.x + noise / self.cfg.residual_scale
        recon = self.reconstruct(state.z, state.h, x2=x2_recon, cond=cond)
        residual_nll = None
        if self.cfg.residual_head:
            # Head-only auxiliary objective: the residual branch and trunk are
            # detached, so this term never perturbs the main objective.
            scales = self.residual_scales(state.z.detach(), cond)
            symbols = state.x.detach() * self.cfg.residual_scale
            if quant_mode == "noise":
                symbols = symbols + torch.empty_like(symbols).uniform_(-0.5, 0.5)
            lik = gauss_uniform_pmf(symbols, torch.zeros_like(symbols), scales)
            residual_nll = entropy.rate_nats(lik) / symbols.numel()
        return ForwardOutput(state=state, recon=recon, z_likelihood=z_lik, h_likelihood=h_lik, residual_nll=residual_nll)


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------

def config_hash(model: CodecModel) -> bytes:
    """8-byte digest over the config and all parameters/buffers.

    The bitstream header embeds it; decoding with a different architecture or
    different weights is rejected instead of producing silent garbage.
    """
    digest = hashlib.sha256(model.cfg.to_json().encode())
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.digest()[:8]


def save_checkpoint(model: CodecModel, path, step=None):
    """Write a single archive: format integer, config record, named arrays."""
    arrays = {
        "__format__": np.int64(CHECKPOINT_FORMAT),
        "__config__": np.frombuffer(model.cfg.to_json().encode(), dtype=np.uint8),
    }
    if step is not None:
        arrays["__step__"] = np.int64(step)
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> CodecModel:
    with np.load(path) as archive:
        fmt = int(archive["__format__"])
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {fmt}")
        cfg = ModelConfig.from_json(bytes(archive["__config__"]).decode())
        model = CodecModel(cfg)
        state = {}
        for key in archive.files:
            if key.startswith("param/"):
                state[key[len("param/") :]] = torch.from_numpy(archive[key])
        model.load_state_dict(state)
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
