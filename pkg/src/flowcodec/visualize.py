"""Diagnostics views: per-step transform outputs, frequency spectra, and
latent heatmaps. Pure views; nothing here feeds back into recorded metrics."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .flow import AugmentedState, encode_step
from .model import CodecModel
from .ops import quantize


@torch.no_grad()
def trace_pipeline(model: CodecModel, x, quant_mode="round", cond=None):
    """Run the encode flow capturing per-step x outputs and decoder outputs.

    Returns a dict with lists ``x_steps`` (x after each step) and
    ``dec_outputs`` (the subtracted decoder estimates), plus the pre- and
    post-quantization latents.
    """
    cfg = model.cfg.flow_config
    state = AugmentedState.for_image(x, cfg)
    x_steps = []
    dec_outputs = []
    z_pre = None
    for i, pair in enumerate(model.couplings):
        state = encode_step(state, pair, cond)
        if i == len(model.couplings) - 1:
            h_raw = model.hyper.enc(state.z, cond)
            h_hat = quantize(h_raw, quant_mode) if quant_mode else h_raw
            z_pre = state.z
            z = state.z
            if model.hyper.mean_subtract:
                z = z - model.hyper.dec_mean(h_hat, cond)
            z_hat = quantize(z, quant_mode)
            state = AugmentedState(x=state.x, z=z_hat, h=h_hat)
        mu = pair.dec_net(state.z, cond)
        state = AugmentedState(x=state.x - mu, z=state.z, h=state.h)
        x_steps.append(state.x)
        dec_outputs.append(mu)
    return {
        "x_steps": x_steps,
        "dec_outputs": dec_outputs,
        "z_pre_quant": z_pre,
        "z_hat": state.z,
        "h_hat": state.h,
        "x_final": state.x,
    }


def _to_midgray_image(t):
    """Shift a (1, 3, H, W) tensor so its mean sits at mid-gray 128/255."""
    arr = t[0].permute(1, 2, 0).numpy()
    arr = arr - arr.mean() + 128.0 / 255.0
    return np.clip(arr, 0.0, 1.0)


def log_spectrum(t):
    """Log-magnitude 2-D spectrum of the luma of a (1, 3, H, W) tensor."""
    gray = t[0].mean(dim=0).numpy()
    spec = np.fft.fftshift(np.fft.fft2(gray))
    return np.log(np.abs(spec) + 1e-9)


def highband_energy_fraction(t):
    """Fraction of spectral energy outside the central half-band box."""
    gray = t[0].mean(dim=0).numpy()
    gray = gray - gray.mean()
    spec = np.abs(np.fft.fftshift(np.fft.fft2(gray))) ** 2
    h, w = spec.shape
    ch, cw = h // 4, w // 4
    inner = spec[ch : h - ch, cw : w - cw].sum()
    total = spec.sum()
    if total == 0:
        return 0.0
    return float(1.0 - inner / total)


def visualize_steps(model: CodecModel, x, out_dir, cond=None):
    """Emit the per-step panels, spectra, and latent heatmaps as PNG files.

    Returns (paths, stats): the written figure files and a stats dict with
    the residual-branch MSE against zero and per-step high-band fractions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = trace_pipeline(model, x, cond=cond)
    paths = []

    def save_panel(arr, name, cmap=None):
        path = out_dir / name
        fig, ax = plt.subplots(figsize=(4, 4))
        if cmap:
            im = ax.imshow(arr, cmap=cmap)
            fig.colorbar(im, ax=ax, fraction=0.046)
        else:
            ax.imshow(arr)
        ax.set_axis_off()
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)

    save_panel(_to_midgray_image(x), "x_input.png")
    save_panel(log_spectrum(x), "x_input_spectrum.png", cmap="magma")
    for i, (xi, mu) in enumerate(zip(trace["x_steps"], trace["dec_outputs"]), start=1):
        save_panel(_to_midgray_image(xi), f"x_step{i}.png")
        save_panel(log_spectrum(xi), f"x_step{i}_spectrum.png", cmap="magma")
        save_panel(_to_midgray_image(mu), f"dec_step{i}.png")
        save_panel(log_spectrum(mu), f"dec_step{i}_spectrum.png", cmap="magma")

    z_hat = trace["z_hat"][0]
    variances = z_hat.flatten(1).var(dim=1)
    top = torch.argsort(variances, descending=True)[:4]
    for rank, c in enumerate(top.tolist()):
        save_panel(z_hat[c].numpy(), f"z_hat_channel{rank}_c{c}.png", cmap="viridis")

    x2 = trace["x_final"]
    stats = {
        "x2_mse_vs_zero": float((x2 ** 2).mean()),
        "highband_fraction_input": highband_energy_fraction(x),
        "highband_fraction_steps": [highband_energy_fraction(xi) for xi in trace["x_steps"]],
        "z_hat_top_variance_channels": top.tolist(),
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2))
    return paths, stats
