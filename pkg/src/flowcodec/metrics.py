"""Quality metrics and rate-distortion aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0
MSSSIM_MIN_SIDE = 160
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1 = 0.01
_K2 = 0.03


class MetricError(ValueError):
    """Raised when a metric's preconditions are not met."""


def _to_unit_uint8(x):
    return torch.round(torch.clamp(x, 0.0, 1.0) * 255.0).to(torch.float64) / 255.0


def psnr_rgb(x, x_hat):
    """PSNR in dB over all RGB samples jointly, on 8-bit quantized values
    rescaled to [0, 1]. Identical inputs return the 100 dB sentinel cap."""
    a = _to_unit_uint8(x)
    b = _to_unit_uint8(x_hat)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def mse(x, x_hat):
    return float(((x.double() - x_hat.double()) ** 2).mean())


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float32):
    coords = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g.reshape(1, 1, 1, size)


def _ssim_cs(x, y, win):
    c = x.shape[1]
    w = win.expand(c, 1, 1, -1)

    def filt(t):
        t = F.conv2d(t, w, groups=c)
        return F.conv2d(t, w.transpose(2, 3), groups=c)

    c1 = _K1 ** 2
    c2 = _K2 ** 2
    mu_x = filt(x)
    mu_y = filt(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = filt(x * x) - mu_xx
    sigma_yy = filt(y * y) - mu_yy
    sigma_xy = filt(x * y) - mu_xy
    cs = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    ssim = ((2 * mu_xy + c1) / (mu_xx + mu_yy + c1)) * cs
    return ssim.mean(), cs.mean()


def msssim(x, y):
    """Five-scale multi-scale structural similarity on [0, 1] images.

    Standard constants (K1=0.01, K2=0.03), 11-tap Gaussian window with
    sigma 1.5, and the conventional scale weights. Differentiable. Inputs
    smaller than the five-level pyramid allows raise :class:`MetricError`.
    """
    if min(x.shape[-2], x.shape[-1]) <= MSSSIM_MIN_SIDE:
        raise MetricError(
            f"images must exceed {MSSSIM_MIN_SIDE} px on each side for the five-scale pyramid"
        )
    win = _gaussian_window(dtype=x.dtype)
    levels = len(_MSSSIM_WEIGHTS)
    mcs = []
    ssim_val = None
    for level in range(levels):
        ssim_val, cs = _ssim_cs(x, y, win)
        if level < levels - 1:
            mcs.append(torch.relu(cs))
            pad = (x.shape[-2] % 2, x.shape[-1] % 2)
            x = F.avg_pool2d(x, kernel_size=2, padding=pad)
            y = F.avg_pool2d(y, kernel_size=2, padding=pad)
    terms = torch.stack(mcs + [torch.relu(ssim_val)])
    weights = torch.as_tensor(_MSSSIM_WEIGHTS, dtype=x.dtype)
    return torch.prod(terms ** weights)


# ---------------------------------------------------------------------------
# Rate-distortion records and BD-rate
# ---------------------------------------------------------------------------

@dataclass
class RDRecord:
    """One image at one rate point. ``msssim`` is None when the image is too
    small for the five-scale pyramid."""

    image_id: str
    bpp: float
    psnr_rgb: float
    msssim: float | None = None
    lambda_value: float | None = None
    lambda_index: int | None = None

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")
        if not math.isfinite(self.psnr_rgb):
            raise ValueError("psnr must be finite (identical images use the cap)")


def average_rate_point(records):
    """Average per-image metrics into one curve point (per-image PSNR is
    averaged, not pooled MSE)."""
    if not records:
        raise ValueError("no records")
    ms = [r.msssim for r in records if r.msssim is not None]
    return RDRecord(
        image_id=f"avg[{len(records)}]",
        bpp=float(np.mean([r.bpp for r in records])),
        psnr_rgb=float(np.mean([r.psnr_rgb for r in records])),
        msssim=float(np.mean(ms)) if ms else None,
        lambda_value=records[0].lambda_value,
        lambda_index=records[0].lambda_index,
    )


def _check_curve(rate, quality, name):
    rate = np.asarray(rate, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if rate.shape != quality.shape or rate.ndim != 1:
        raise ValueError(f"{name}: rate and quality must be matching 1-D arrays")
    if len(rate) < 4:
        raise ValueError(f"{name}: BD-rate needs at least 4 points, got {len(rate)}")
    if np.any(rate <= 0):
        raise ValueError(f"{name}: rates must be positive")
    order = np.argsort(quality)
    return rate[order], quality[order]


def bd_rate(rate_test, quality_test, rate_anchor, quality_anchor):
    """Bjontegaard delta rate of the test curve versus the anchor, percent.

    Cubic polynomial fit of log-rate as a function of quality on each curve,
    integrated over the overlapping quality interval; negative values mean
    the test codec spends less rate at equal quality.
    """
    rt, qt = _check_curve(rate_test, quality_test, "test")
    ra, qa = _check_curve(rate_anchor, quality_anchor, "anchor")
    lo = max(qt.min(), qa.min())
    hi = min(qt.max(), qa.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping quality range")
    pt = np.polyfit(qt, np.log(rt), 3)
    pa = np.polyfit(qa, np.log(ra), 3)
    it = np.polyint(pt)
    ia = np.polyint(pa)
    avg_t = (np.polyval(it, hi) - np.polyval(it, lo)) / (hi - lo)
    avg_a = (np.polyval(ia, hi) - np.polyval(ia, lo)) / (hi - lo)
    return float((math.exp(avg_t - avg_a) - 1.0) * 100.0)


def bd_rate_curves(test_records, anchor_records):
    return bd_rate(
        [r.bpp for r in test_records],
        [r.psnr_rgb for r in test_records],
        [r.bpp for r in anchor_records],
        [r.psnr_rgb for r in anchor_records],
    )


def write_records_json(path, records, metadata=None):
    doc = {
        "metadata": {"psnr_aggregation": "per-image average", **(metadata or {})},
        "records": [asdict(r) for r in records],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def read_records_json(path):
    with open(path) as f:
        doc = json.load(f)
    return [RDRecord(**r) for r in doc["records"]]


def write_records_csv(path, records):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["image_id", "bpp", "psnr_rgb", "msssim", "lambda_value", "lambda_index"]
        )
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))
