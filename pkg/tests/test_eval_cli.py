"""End-to-end command-line and evaluation-surface tests."""

import json
import math

import numpy as np
import pytest
import torch

from flowcodec import codec
from flowcodec.cli import main
from flowcodec.evaluation import evaluate_image, load_image, rd_sweep, save_image
from flowcodec.metrics import read_records_json
from flowcodec.model import CodecModel, ModelConfig, save_checkpoint
from flowcodec.visualize import highband_energy_fraction, log_spectrum, visualize_steps

from conftest import synthetic_image


@pytest.fixture
def small_ckpt(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    save_checkpoint(tiny_model, path)
    return path


@pytest.fixture
def png(tmp_path):
    path = tmp_path / "input.png"
    save_image(synthetic_image(64, seed=40), path)
    return path


class TestImageIO:
    def test_png_roundtrip_8bit_exact(self, tmp_path):
        x = synthetic_image(64, seed=41)
        save_image(x, tmp_path / "a.png")
        back = load_image(tmp_path / "a.png")
        assert torch.equal(codec.to_uint8(back), codec.to_uint8(x))


class TestCli:
    def test_encode_decode_roundtrip_via_files(self, tmp_path, small_ckpt, png, tiny_model):
        bitstream = tmp_path / "out.fc"
        decoded = tmp_path / "out.png"
        assert main(["encode", "--checkpoint", str(small_ckpt), "--input", str(png), "--output", str(bitstream)]) == 0
        assert main(["decode", "--checkpoint", str(small_ckpt), "--input", str(bitstream), "--output", str(decoded)]) == 0
        # file-path decode equals in-memory decode bit for bit on 8-bit output
        x = load_image(png)
        container = codec.BitstreamContainer.parse(bitstream.read_bytes())
        expected = codec.decode_image(tiny_model, container)
        assert torch.equal(codec.to_uint8(load_image(decoded)), codec.to_uint8(expected))

    def test_unknown_flag_usage_error(self, small_ckpt):
        with pytest.raises(SystemExit) as err:
            main(["encode", "--checkpoint", str(small_ckpt), "--frobnicate"])
        assert err.value.code == 2

    def test_unknown_command_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["compress-everything"])
        assert err.value.code == 2

    def test_runtime_error_exit_one(self, tmp_path, small_ckpt):
        missing = tmp_path / "missing.png"
        rc = main(["encode", "--checkpoint", str(small_ckpt), "--input", str(missing), "--output", str(tmp_path / "o.fc")])
        assert rc == 1

    def test_mode_mismatch_rejected(self, tmp_path, small_ckpt, png):
        rc = main([
            "encode", "--checkpoint", str(small_ckpt), "--input", str(png),
            "--output", str(tmp_path / "o.fc"), "--mode", "gaussian",
        ])
        assert rc == 1

    def test_selftest_command(self):
        assert main(["selftest"]) == 0

    def test_bdrate_command(self, tmp_path, capsys):
        from flowcodec.metrics import RDRecord, write_records_json

        quality = [30.0, 32.0, 34.0, 36.0]
        anchor = [RDRecord(image_id=f"p{i}", bpp=r, psnr_rgb=q) for i, (r, q) in enumerate(zip([0.2, 0.4, 0.8, 1.6], quality))]
        test = [RDRecord(image_id=f"p{i}", bpp=0.9 * r.bpp, psnr_rgb=r.psnr_rgb) for i, r in enumerate(anchor)]
        write_records_json(tmp_path / "anchor.json", anchor)
        write_records_json(tmp_path / "test.json", test)
        assert main(["bdrate", "--test", str(tmp_path / "test.json"), "--anchor", str(tmp_path / "anchor.json")]) == 0
        out = capsys.readouterr().out
        assert "-10.0" in out

    def test_visualize_command(self, tmp_path, small_ckpt, png):
        rc = main(["visualize", "--checkpoint", str(small_ckpt), "--input", str(png), "--out", str(tmp_path / "vis")])
        assert rc == 0
        assert (tmp_path / "vis" / "stats.json").exists()
        assert (tmp_path / "vis" / "x_step1.png").exists()

    def test_train_and_eval_commands(self, tmp_path, png):
        import yaml

        cfg = {
            "model": {"num_steps": 1, "width": 8, "latent_channels": 6, "hyper_channels": 4},
            "train": {"lambda2": 0.1, "batch_size": 1, "crop_size": 64, "max_steps": 8,
                      "log_every": 4, "checkpoint_every": 100},
        }
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        save_image(synthetic_image(64, seed=50), data_dir / "a.png")
        out = tmp_path / "run_out"
        assert main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out), "--seed", "1"]) == 0
        ckpt = out / "checkpoint_final.npz"
        assert ckpt.exists()
        eval_out = tmp_path / "eval_out"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir), "--out", str(eval_out)]) == 0
        records = read_records_json(eval_out / "records.json")
        assert len(records) == 1
        curve = read_records_json(eval_out / "curve.json")
        assert (eval_out / "rd_curve.png").exists()
        assert (eval_out / "records.csv").exists()


class TestSweep:
    def test_two_rate_points_two_records(self, tmp_path):
        torch.manual_seed(3)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        a = CodecModel(cfg)
        torch.manual_seed(4)
        b = CodecModel(cfg)
        data_dir = tmp_path / "imgs"
        data_dir.mkdir()
        save_image(synthetic_image(64, seed=51), data_dir / "one.png")
        curve = rd_sweep([("a", a, None), ("b", b, None)], data_dir, tmp_path / "sweep")
        assert len(curve) == 2

    def test_bpp_matches_container_bytes_exactly(self, tmp_path, tiny_model):
        data_dir = tmp_path / "imgs"
        data_dir.mkdir()
        save_image(synthetic_image(64, seed=52), data_dir / "one.png")
        rec = evaluate_image(tiny_model, data_dir / "one.png", out_dir=tmp_path / "o")
        blob = (tmp_path / "o" / "one.fc").read_bytes()
        assert rec.bpp == len(blob) * 8.0 / (64 * 64)

    def test_metrics_recomputable_from_artifacts(self, tmp_path, tiny_model):
        from flowcodec.metrics import psnr_rgb

        data_dir = tmp_path / "imgs"
        data_dir.mkdir()
        save_image(synthetic_image(64, seed=53), data_dir / "one.png")
        rec = evaluate_image(tiny_model, data_dir / "one.png", out_dir=tmp_path / "o")
        decoded = load_image(tmp_path / "o" / "one_decoded.png")
        original = load_image(data_dir / "one.png")
        assert psnr_rgb(original, decoded) == pytest.approx(rec.psnr_rgb, abs=1e-9)


class TestVisualization:
    def test_zero_network_model_gray_panels(self, tmp_path, tiny_cfg):
        model = CodecModel(tiny_cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        x = synthetic_image(64, seed=54)
        paths, stats = visualize_steps(model, x, tmp_path / "vis")
        # zero couplings never change the x branch, so every step panel is
        # the input; the mean-shifted dec panels are exactly mid-gray
        from PIL import Image

        arr = np.asarray(Image.open(tmp_path / "vis" / "dec_step1.png").convert("RGB"), dtype=np.float64)
        interior = arr[20:-20, 20:-20]
        assert np.all(np.abs(interior - 128.0) < 2.0)

    def test_sinusoid_spectrum_single_peak(self):
        size = 64
        yy, xx = np.mgrid[0:size, 0:size]
        img = 0.5 + 0.4 * np.sin(2 * np.pi * 8 * xx / size)
        x = torch.from_numpy(np.stack([img] * 3).astype(np.float32)).unsqueeze(0)
        spec = log_spectrum(x)
        flat = np.exp(spec).flatten()
        order = np.argsort(flat)[::-1]
        # DC plus two symmetric peaks dominate everything else
        top3 = flat[order[:3]].sum()
        assert top3 / flat.sum() > 0.95

    def test_highband_fraction_ordering(self):
        size = 64
        yy, xx = np.mgrid[0:size, 0:size]
        low = 0.5 + 0.4 * np.sin(2 * np.pi * 2 * xx / size)
        high = 0.5 + 0.4 * np.sin(2 * np.pi * 24 * xx / size)
        tlow = torch.from_numpy(np.stack([low] * 3).astype(np.float32)).unsqueeze(0)
        thigh = torch.from_numpy(np.stack([high] * 3).astype(np.float32)).unsqueeze(0)
        assert highband_energy_fraction(thigh) > highband_energy_fraction(tlow)


class TestVariableRateEndToEnd:
    def test_encode_decode_each_index(self, tmp_path):
        torch.manual_seed(9)
        cfg = ModelConfig(
            num_steps=1, width=8, latent_channels=6, hyper_channels=4,
            lambda_values=(0.1, 0.05, 0.02, 0.01, 0.005),
        )
        model = CodecModel(cfg)
        model.eval()
        x = synthetic_image(64, seed=61)
        for idx in (0, 2, 4):
            container = codec.encode_image(model, x, lambda_index=idx)
            parsed = codec.BitstreamContainer.parse(container.serialize())
            assert parsed.lambda_index == idx
            recon = codec.decode_image(model, parsed)
            assert recon.shape == x.shape

    def test_sweep_emits_one_point_per_index(self, tmp_path):
        from flowcodec.evaluation import save_image
        from flowcodec.model import save_checkpoint
        from flowcodec.evaluation import load_rate_points, rd_sweep

        torch.manual_seed(10)
        cfg = ModelConfig(
            num_steps=1, width=8, latent_channels=6, hyper_channels=4,
            lambda_values=(0.1, 0.05, 0.02, 0.01, 0.005),
        )
        model = CodecModel(cfg)
        ckpt = tmp_path / "vr.npz"
        save_checkpoint(model, ckpt)
        data_dir = tmp_path / "imgs"
        data_dir.mkdir()
        save_image(synthetic_image(64, seed=62), data_dir / "one.png")
        points = load_rate_points([ckpt])
        assert len(points) == 5
        curve = rd_sweep(points, data_dir, tmp_path / "sweep")
        assert len(curve) == 5
        assert [r.lambda_index for r in curve] == [0, 1, 2, 3, 4]
