"""Rate-distortion sweeps through the real bitstream, plus image file I/O."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from . import codec
from .metrics import MetricError, RDRecord, average_rate_point, msssim, psnr_rgb, write_records_csv, write_records_json
from .model import CodecModel, load_checkpoint


def load_image(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def save_image(x, path):
    arr = codec.to_uint8(x)[0].permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path)


def _iter_images(data_dir):
    paths = sorted(
        p for p in Path(data_dir).rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise ValueError(f"no images under {data_dir}")
    return paths


def evaluate_image(model: CodecModel, image_path, out_dir=None, lambda_index=None, residual=False):
    """Encode and decode one image through files; return the RDRecord.

    Every recorded number is recomputable from the written container bytes
    plus the decoded PNG alone.
    """
    x = load_image(image_path)
    container = codec.encode_image(model, x, residual=residual, lambda_index=lambda_index)
    data = container.serialize()
    recon = codec.decode_image(model, codec.BitstreamContainer.parse(data))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(image_path).stem
        (out_dir / f"{stem}.fc").write_bytes(data)
        save_image(recon, out_dir / f"{stem}_decoded.png")
    try:
        ms = float(msssim(x, recon))
    except MetricError:
        ms = None
    lam = None
    if lambda_index is not None:
        lam = model.cfg.lambda_values[lambda_index]
    return RDRecord(
        image_id=Path(image_path).name,
        bpp=len(data) * 8.0 / (x.shape[-2] * x.shape[-1]),
        psnr_rgb=psnr_rgb(x, recon),
        msssim=ms,
        lambda_value=lam,
        lambda_index=lambda_index,
    )


def rd_sweep(rate_points, data_dir, out_dir, residual=False):
    """Sweep a set of rate points over a directory of images.

    ``rate_points`` is a list of (label, model, lambda_index) triples: one
    per checkpoint for multi-model sweeps, or one per lambda index of a
    single variable-rate model. Writes per-point records and the averaged
    curve as JSON/CSV plus an RD plot; returns the averaged curve records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _iter_images(data_dir)
    curve = []
    all_records = []
    for label, model, lambda_index in rate_points:
        point_records = []
        for path in images:
            rec = evaluate_image(
                model, path, out_dir=out_dir / label, lambda_index=lambda_index, residual=residual
            )
            point_records.append(rec)
        all_records.extend(point_records)
        curve.append(average_rate_point(point_records))
    write_records_json(out_dir / "records.json", all_records, metadata={"points": len(curve)})
    write_records_csv(out_dir / "records.csv", all_records)
    write_records_json(out_dir / "curve.json", curve)
    plot_rd_curve(curve, out_dir / "rd_curve.png")
    return curve


def load_rate_points(checkpoint_paths, lambda_indices=None):
    """Build sweep rate points from checkpoints and/or lambda indices."""
    points = []
    for path in checkpoint_paths:
        model = load_checkpoint(path)
        if model.cfg.variable_rate:
            indices = lambda_indices or list(range(len(model.cfg.lambda_values)))
            for idx in indices:
                points.append((f"{Path(path).stem}_lam{idx}", model, idx))
        else:
            points.append((Path(path).stem, model, None))
    return points


def plot_rd_curve(records, path, label="flowcodec"):
    fig, ax = plt.subplots(figsize=(5, 4))
    bpp = [r.bpp for r in records]
    psnr = [r.psnr_rgb for r in records]
    ax.plot(bpp, psnr, "o-", label=label)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("PSNR-RGB (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
