"""Command-line interface.

Exit codes: 0 success, 2 usage error (argparse), 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch
import yaml

from . import codec
from .evaluation import evaluate_image, load_image, load_rate_points, rd_sweep, save_image
from .metrics import bd_rate, read_records_json
from .model import CodecModel, ModelConfig, load_checkpoint, parameter_count, save_checkpoint
from .training import TrainConfig, FixedCrop, ImageFolderCrops, finetune_for_rate, train
from .visualize import visualize_steps


def load_run_config(path):
    """YAML run config with ``model:`` and ``train:`` sections."""
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    model_cfg = ModelConfig(**doc.get("model", {}))
    train_cfg = TrainConfig(**doc.get("train", {}))
    return model_cfg, train_cfg


def _data_source(args, crop_size):
    if args.data is None:
        raise SystemExit("--data is required for this command")
    return ImageFolderCrops(args.data)


def _cmd_train(args):
    model_cfg, train_cfg = load_run_config(args.config)
    if args.mode:
        model_cfg.entropy_mode = args.mode
    if args.lambda2 is not None:
        train_cfg.lambda2 = args.lambda2
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.steps is not None:
        train_cfg.max_steps = args.steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg.save(out / "train_config.yaml")
    (out / "model_config.yaml").write_text(yaml.safe_dump({"model": yaml.safe_load(model_cfg.to_json())}))
    model = CodecModel(model_cfg)
    print(f"training {parameter_count(model)} parameters, lambda2={train_cfg.lambda2}")
    data = _data_source(args, train_cfg.crop_size)
    checkpoints = train(model, data, train_cfg, out)
    print(f"final checkpoint: {checkpoints[-1]}")
    return 0


def _cmd_finetune(args):
    _, train_cfg = load_run_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    model = load_checkpoint(args.checkpoint)
    data = _data_source(args, train_cfg.crop_size)
    out = Path(args.out)
    checkpoints = finetune_for_rate(model, args.lambda2, train_cfg, data, out)
    print(f"fine-tuned checkpoint: {checkpoints[-1]}")
    return 0


def _residual_flag(value):
    return value == "on"


def _cmd_encode(args):
    model = load_checkpoint(args.checkpoint)
    if args.mode and args.mode != model.cfg.entropy_mode:
        raise codec.CodecError(
            f"checkpoint uses entropy mode {model.cfg.entropy_mode!r}, not {args.mode!r}"
        )
    x = load_image(args.input)
    container = codec.encode_image(
        model, x, residual=_residual_flag(args.residual), lambda_index=args.lambda_index
    )
    data = container.serialize()
    Path(args.output).write_bytes(data)
    print(f"{args.input}: {len(data)} bytes, {container.bpp():.4f} bpp")
    return 0


def _cmd_decode(args):
    model = load_checkpoint(args.checkpoint)
    container = codec.BitstreamContainer.parse(Path(args.input).read_bytes())
    recon = codec.decode_image(model, container)
    save_image(recon, args.output)
    print(f"decoded {container.width}x{container.height} image to {args.output}")
    return 0


def _cmd_eval(args):
    indices = None if args.lambda_index is None else [args.lambda_index]
    points = load_rate_points(args.checkpoint, indices)
    curve = rd_sweep(points, args.data, args.out, residual=_residual_flag(args.residual))
    for rec in curve:
        ms = f"{rec.msssim:.4f}" if rec.msssim is not None else "n/a"
        print(f"{rec.image_id}: {rec.bpp:.4f} bpp, {rec.psnr_rgb:.2f} dB, msssim {ms}")
    return 0


def _cmd_bdrate(args):
    test = read_records_json(args.test)
    anchor = read_records_json(args.anchor)
    value = bd_rate(
        [r.bpp for r in test], [r.psnr_rgb for r in test],
        [r.bpp for r in anchor], [r.psnr_rgb for r in anchor],
    )
    print(f"BD-rate: {value:+.3f}%")
    return 0


def _cmd_visualize(args):
    model = load_checkpoint(args.checkpoint)
    x = load_image(args.input)
    x, _ = codec.pad_reflect(x)
    paths, stats = visualize_steps(model, x, args.out)
    print(f"wrote {len(paths)} figures to {args.out}")
    print(f"x2 mse vs zero: {stats['x2_mse_vs_zero']:.6f}")
    return 0


def _cmd_selftest(args):
    from . import selftest

    failures = selftest.run(verbose=True)
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="flowcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda2", "--lambda", dest="lambda2", type=float)
    p.add_argument("--mode", choices=["gmm", "gaussian"])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new rate point")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda2", "--lambda", dest="lambda2", type=float, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("encode", help="encode a PNG to a bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--residual", choices=["on", "off"], default="off")
    p.add_argument("--mode", choices=["gmm", "gaussian"])
    p.add_argument("--lambda-index", type=int)
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream to a PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval", help="rate-distortion sweep over a directory")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--residual", choices=["on", "off"], default="off")
    p.add_argument("--lambda-index", type=int)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two record files")
    p.add_argument("--test", required=True)
    p.add_argument("--anchor", required=True)
    p.set_defaults(fn=_cmd_bdrate)

    p = sub.add_parser("visualize", help="per-step transform diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_visualize)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None):
    from .coder import CoderError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (codec.CodecError, CoderError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
