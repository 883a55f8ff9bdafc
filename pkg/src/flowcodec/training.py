"""Rate-distortion-regularization objective and the optimization loop.

The per-step objective is

    total = R + reg + D

with R the latent code length in nats per pixel, ``reg`` the weighted
squared (or absolute) norm of the residual x branch, and D the weighted
distortion. Distortion and regularization are computed on the 255-scaled
pixel domain so the published lambda ranges land at sensible operating
points; the rate term stays in natural log units inside the loss and is
converted to bits only for reporting.
"""

from __future__ import annotations

import csv
import json
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .entropy import rate_nats
from .metrics import msssim as msssim_metric
from .model import CodecModel, ForwardOutput, save_checkpoint

PIXEL_SCALE = 255.0
_LN2 = math.log(2.0)

MSE_LAMBDAS = (0.1, 0.05, 0.02, 0.01, 0.005, 0.002)
MSSSIM_LAMBDAS = (200.0, 100.0, 40.0, 20.0, 10.0, 4.0)
VARIABLE_RATE_LAMBDAS = (0.1, 0.05, 0.02, 0.01, 0.005)
LAMBDA1_RATIO = 0.01


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    """One training run, fully determined by this record plus the seed."""

    lambda2: float = 0.01
    lambda1: float | None = None  # None -> LAMBDA1_RATIO * lambda2
    distortion: str = "mse"  # "mse" | "msssim"
    reg_norm: str = "l2"  # "l2" | "l1" | "none"
    lr: float = 1e-4
    lr_decayed: float = 1e-5
    decay_step: int = 40000
    max_steps: int = 50000
    finetune_steps: int | None = None  # None -> max_steps // 10
    batch_size: int = 8
    crop_size: int = 64
    seed: int = 0
    lambda_set: tuple = field(default_factory=tuple)  # variable-rate training
    # Fraction of steps whose reconstruction keeps the (noise-quantized)
    # residual branch instead of zeroing it; needed when the model will be
    # used in residual-transmission mode, so the enhancement network trains
    # on both decode paths.
    residual_path_fraction: float = 0.0
    checkpoint_every: int = 5000
    log_every: int = 50

    def __post_init__(self):
        self.lambda_set = tuple(float(v) for v in self.lambda_set)
        if self.lambda2 <= 0:
            raise ValueError("lambda2 must be positive")
        if self.crop_size % 64:
            raise ValueError("crop_size must be divisible by 64")
        if self.distortion not in ("mse", "msssim"):
            raise ValueError("distortion must be 'mse' or 'msssim'")
        if self.reg_norm not in ("l2", "l1", "none"):
            raise ValueError("reg_norm must be 'l2', 'l1' or 'none'")
        if self.distortion == "msssim" and self.crop_size <= 160:
            raise ValueError("msssim training needs crop_size > 160")

    def effective_lambda1(self, lambda2=None):
        if self.lambda1 is not None:
            return self.lambda1
        return LAMBDA1_RATIO * (self.lambda2 if lambda2 is None else lambda2)

    def save(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(asdict(self), f, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = yaml.safe_load(f)
        return cls(**data)


@dataclass
class LossParts:
    total: torch.Tensor
    rate: torch.Tensor
    reg: torch.Tensor
    distortion: torch.Tensor

    @property
    def rate_bpp(self):
        return float(self.rate.detach()) / _LN2

    def as_floats(self):
        return {
            "total": float(self.total.detach()),
            "rate": float(self.rate.detach()),
            "reg": float(self.reg.detach()),
            "distortion": float(self.distortion.detach()),
        }


def compute_loss(x, out: ForwardOutput, cfg: TrainConfig, lambda2=None) -> LossParts:
    """Assemble the objective from pipeline outputs.

    ``lambda2`` overrides the config value (variable-rate training); the
    regularizer weight tracks it through the configured ratio. The three
    components sum to the total exactly, with no hidden terms.
    """
    lam2 = cfg.lambda2 if lambda2 is None else lambda2
    lam1 = cfg.effective_lambda1(lam2)
    num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    rate = rate_nats(out.z_likelihood, out.h_likelihood) / num_pixels

    x2 = out.state.x
    if cfg.reg_norm == "l2":
        reg = lam1 * (PIXEL_SCALE ** 2) * (x2 ** 2).mean()
    elif cfg.reg_norm == "l1":
        reg = lam1 * PIXEL_SCALE * x2.abs().mean()
    else:
        reg = rate.new_zeros(())

    if cfg.distortion == "mse":
        dist = lam2 * (PIXEL_SCALE ** 2) * ((x - out.recon) ** 2).mean()
    else:
        dist = lam2 * (1.0 - msssim_metric(x, out.recon))

    total = rate + reg + dist
    if not torch.isfinite(total):
        raise TrainingDiverged(
            "non-finite loss",
            snapshot={
                "rate": float(rate.detach()),
                "reg": float(reg.detach()),
                "distortion": float(dist.detach()),
                "lambda2": lam2,
            },
        )
    return LossParts(total=total, rate=rate, reg=reg, distortion=dist)


def variable_rate_loss(x, model: CodecModel, lambda_indices, cfg: TrainConfig):
    """Average of the objective over the given rate points.

    Each index runs the pipeline under its own conditioning and its own
    lambda pair. A single-element set reduces to the ordinary loss.
    """
    parts = []
    for idx in lambda_indices:
        out = model(x, "noise", lambda_index=idx)
        parts.append(compute_loss(x, out, cfg, lambda2=model.cfg.lambda_values[idx]))
    total = torch.stack([p.total for p in parts]).mean()
    return total, parts


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------

class FixedCrop:
    """A single in-memory crop repeated across the batch (overfit runs)."""

    def __init__(self, crop):
        if crop.ndim != 4 or crop.shape[0] != 1:
            raise ValueError("expected a (1, 3, H, W) tensor")
        self.crop = crop

    def sample(self, batch_size, crop_size, generator=None):
        if crop_size != self.crop.shape[-1] or crop_size != self.crop.shape[-2]:
            raise ValueError("crop_size does not match the stored crop")
        return self.crop.expand(batch_size, -1, -1, -1)


class ImageFolderCrops:
    """Random crops from every PNG (or JPEG) under a directory."""

    EXTENSIONS = (".png", ".jpg", ".jpeg")

    def __init__(self, root):
        root = Path(root)
        self.paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in self.EXTENSIONS)
        if not self.paths:
            raise ValueError(f"no images found under {root}")

    def sample(self, batch_size, crop_size, generator=None):
        gen = generator or torch.default_generator
        crops = []
        for _ in range(batch_size):
            idx = int(torch.randint(len(self.paths), (1,), generator=gen))
            with Image.open(self.paths[idx]) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            h, w, _ = arr.shape
            if h < crop_size or w < crop_size:
                raise ValueError(f"{self.paths[idx]} smaller than crop {crop_size}")
            i = int(torch.randint(h - crop_size + 1, (1,), generator=gen))
            j = int(torch.randint(w - crop_size + 1, (1,), generator=gen))
            crops.append(torch.from_numpy(arr[i : i + crop_size, j : j + crop_size]).permute(2, 0, 1))
        return torch.stack(crops)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def _lr_at(step, cfg):
    return cfg.lr if step <= cfg.decay_step else cfg.lr_decayed


def train(model: CodecModel, data, cfg: TrainConfig, out_dir, stop_fn=None, max_steps=None):
    """First-order adaptive-moment optimization with periodic checkpoints.

    Deterministic given the seed (single process). ``stop_fn(step, model)``
    is polled at logging steps and may end the run early. Returns the list of
    checkpoint paths, the last being the final state.

    With the residual scale head enabled, a detached head-only likelihood
    term is added to the optimized objective; it cannot influence the main
    objective's gradients and is logged separately.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    random.seed(cfg.seed)
    steps = max_steps if max_steps is not None else cfg.max_steps

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    log_path = out_dir / "train_log.csv"
    new_log = not log_path.exists()
    checkpoints = []
    recent = deque(maxlen=500)
    high_count = 0

    model.train()
    with open(log_path, "a", newline="") as log_file:
        writer = csv.writer(log_file)
        if new_log:
            writer.writerow(["step", "total", "R_bpp", "reg", "D", "lr"])
        for step in range(1, steps + 1):
            lr = _lr_at(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = data.sample(cfg.batch_size, cfg.crop_size)

            keep_x2 = bool(
                model.cfg.residual_head
                and cfg.residual_path_fraction > 0
                and float(torch.rand(())) < cfg.residual_path_fraction
            )
            if model.cfg.variable_rate:
                idx = int(torch.randint(len(model.cfg.lambda_values), (1,)))
                out = model(batch, "noise", lambda_index=idx, keep_x2=keep_x2)
                parts = compute_loss(batch, out, cfg, lambda2=model.cfg.lambda_values[idx])
            else:
                out = model(batch, "noise", keep_x2=keep_x2)
                parts = compute_loss(batch, out, cfg)
            objective = parts.total
            if out.residual_nll is not None:
                objective = objective + out.residual_nll

            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()

            loss_val = float(parts.total.detach())
            if recent and loss_val > 10.0 * float(np.median(recent)):
                high_count += 1
                if high_count >= 100:
                    report = {"step": step, "loss": loss_val, "median": float(np.median(recent))}
                    (out_dir / "divergence_report.json").write_text(json.dumps(report))
                    raise TrainingDiverged(f"loss diverged at step {step}", snapshot=report)
            else:
                high_count = 0
            recent.append(loss_val)

            if step % cfg.log_every == 0 or step == steps:
                writer.writerow(
                    [step, f"{loss_val:.6f}", f"{parts.rate_bpp:.6f}",
                     f"{float(parts.reg.detach()):.6f}", f"{float(parts.distortion.detach()):.6f}", lr]
                )
                log_file.flush()
                if stop_fn is not None and stop_fn(step, model):
                    break
            if step % cfg.checkpoint_every == 0:
                path = out_dir / f"checkpoint_{step:07d}.npz"
                save_checkpoint(model, path, step=step)
                checkpoints.append(path)

    final = out_dir / "checkpoint_final.npz"
    save_checkpoint(model, final)
    checkpoints.append(final)
    model.eval()
    return checkpoints


def finetune_for_rate(model: CodecModel, new_lambda2, cfg: TrainConfig, data, out_dir, stop_fn=None):
    """Adapt a trained model to a new trade-off point at the decayed rate.

    Follows the highest-rate-first protocol: start from the parent weights,
    swap in the new lambda, and re-optimize briefly at the decayed learning
    rate (default one tenth of the base step budget).
    """
    steps = cfg.finetune_steps if cfg.finetune_steps is not None else max(1, cfg.max_steps // 10)
    ft_cfg = TrainConfig(**{**asdict(cfg), "lambda2": new_lambda2, "lambda1": None,
                            "lr": cfg.lr_decayed, "decay_step": 0, "max_steps": steps})
    return train(model, data, ft_cfg, out_dir, stop_fn=stop_fn)
