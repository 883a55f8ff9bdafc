"""PSNR, MS-SSIM aggregation types, and the BD-rate oracle."""

import math

import numpy as np
import pytest
import torch

from flowcodec.metrics import (
    RDRecord,
    average_rate_point,
    bd_rate,
    psnr_rgb,
    read_records_json,
    write_records_csv,
    write_records_json,
)


class TestPsnr:
    def test_identical_capped_sentinel(self):
        x = torch.rand(1, 3, 16, 16)
        assert psnr_rgb(x, x.clone()) == 100.0

    def test_uniform_one_lsb_error(self):
        # Every sample off by exactly 1/255 after 8-bit quantization.
        x = torch.zeros(1, 3, 32, 32)
        x_hat = torch.full((1, 3, 32, 32), 1.0 / 255.0)
        expected = 20 * math.log10(255.0)
        assert psnr_rgb(x, x_hat) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(48.1308, abs=1e-3)

    def test_matches_scalar_loop_reference(self):
        # Oracle: explicit per-sample loop over the 8-bit quantized values.
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 8, 8, generator=g)
        x_hat = (x + 0.05 * torch.randn(1, 3, 8, 8, generator=g)).clamp(0, 1)
        qa = torch.round(x * 255).flatten().tolist()
        qb = torch.round(x_hat * 255).flatten().tolist()
        se = sum((a / 255 - b / 255) ** 2 for a, b in zip(qa, qb))
        oracle = 10 * math.log10(1.0 / (se / len(qa)))
        assert psnr_rgb(x, x_hat) == pytest.approx(oracle, abs=1e-9)

    def test_computed_on_8bit_grid(self):
        x = torch.zeros(1, 3, 4, 4)
        x_hat = torch.full((1, 3, 4, 4), 0.4 / 255.0)  # rounds to zero
        assert psnr_rgb(x, x_hat) == 100.0


class TestBdRate:
    QUALITY = [30.0, 32.0, 34.5, 36.0, 38.0]
    RATE = [0.18, 0.31, 0.55, 0.82, 1.40]

    def test_identical_curves_zero(self):
        assert bd_rate(self.RATE, self.QUALITY, self.RATE, self.QUALITY) == pytest.approx(0.0, abs=1e-9)

    def test_constant_rate_scaling_exact(self):
        # Scaling every rate by 0.9 at identical qualities shifts log-rate by
        # a constant, so the integral difference is exactly log(0.9).
        test_rate = [0.9 * r for r in self.RATE]
        value = bd_rate(test_rate, self.QUALITY, self.RATE, self.QUALITY)
        assert value == pytest.approx(-10.0, abs=0.1)
        assert value == pytest.approx((math.exp(math.log(0.9)) - 1) * 100, abs=1e-6)

    def test_sign_convention_cheaper_is_negative(self):
        cheaper = [0.7 * r for r in self.RATE]
        assert bd_rate(cheaper, self.QUALITY, self.RATE, self.QUALITY) < 0
        dearer = [1.3 * r for r in self.RATE]
        assert bd_rate(dearer, self.QUALITY, self.RATE, self.QUALITY) > 0

    def test_antisymmetry_cross_check(self):
        other_q = [29.5, 31.8, 34.0, 36.4, 38.2]
        other_r = [0.15, 0.28, 0.52, 0.90, 1.52]
        ab = bd_rate(self.RATE, self.QUALITY, other_r, other_q)
        ba = bd_rate(other_r, other_q, self.RATE, self.QUALITY)
        # inverse relation up to fit tolerance
        recovered = (1.0 / (1.0 + ab / 100.0) - 1.0) * 100.0
        assert ba == pytest.approx(recovered, abs=0.5)

    def test_fewer_than_four_points_rejected(self):
        with pytest.raises(ValueError):
            bd_rate([0.1, 0.2, 0.3], [30, 31, 32], self.RATE, self.QUALITY)

    def test_no_overlap_rejected(self):
        with pytest.raises(ValueError):
            bd_rate(self.RATE, [10, 11, 12, 13, 14], self.RATE, self.QUALITY)

    def test_nonpositive_rate_rejected(self):
        with pytest.raises(ValueError):
            bd_rate([0.0, 0.2, 0.4, 0.8], [30, 32, 34, 36], self.RATE, self.QUALITY)


class TestRecords:
    def test_invariants(self):
        with pytest.raises(ValueError):
            RDRecord(image_id="a", bpp=0.0, psnr_rgb=30.0)
        with pytest.raises(ValueError):
            RDRecord(image_id="a", bpp=0.5, psnr_rgb=float("inf"))

    def test_average_rate_point(self):
        records = [
            RDRecord(image_id="a", bpp=0.5, psnr_rgb=30.0, msssim=0.9),
            RDRecord(image_id="b", bpp=1.5, psnr_rgb=34.0, msssim=None),
        ]
        avg = average_rate_point(records)
        assert avg.bpp == pytest.approx(1.0)
        assert avg.psnr_rgb == pytest.approx(32.0)
        assert avg.msssim == pytest.approx(0.9)

    def test_json_csv_roundtrip(self, tmp_path):
        records = [
            RDRecord(image_id="a", bpp=0.5, psnr_rgb=30.0, msssim=0.9, lambda_value=0.1),
            RDRecord(image_id="b", bpp=1.5, psnr_rgb=34.0),
        ]
        write_records_json(tmp_path / "r.json", records, metadata={"note": "test"})
        again = read_records_json(tmp_path / "r.json")
        assert again == records
        write_records_csv(tmp_path / "r.csv", records)
        assert (tmp_path / "r.csv").read_text().startswith("image_id,bpp")
