"""Objective accounting, gradient correctness, and the optimization loop."""

import csv
import math

import numpy as np
import pytest
import torch

from flowcodec.entropy import LIKELIHOOD_FLOOR
from flowcodec.model import CodecModel, ForwardOutput, ModelConfig
from flowcodec.flow import AugmentedState
from flowcodec.metrics import MetricError, msssim
from flowcodec.training import (
    FixedCrop,
    ImageFolderCrops,
    LossParts,
    TrainConfig,
    TrainingDiverged,
    compute_loss,
    finetune_for_rate,
    train,
    variable_rate_loss,
)

from conftest import synthetic_image


def _fabricated_output(x, z_lik, h_lik, x2, recon):
    state = AugmentedState(x=x2, z=torch.zeros(1, 2, 4, 4), h=torch.zeros(1, 2, 1, 1))
    return ForwardOutput(state=state, recon=recon, z_likelihood=z_lik, h_likelihood=h_lik)


class TestLossAccounting:
    def test_perfect_everything_total_zero(self):
        x = synthetic_image(64, seed=1)
        out = _fabricated_output(x, torch.ones(1, 2, 4, 4), torch.ones(1, 2, 1, 1), torch.zeros_like(x), x.clone())
        parts = compute_loss(x, out, TrainConfig(lambda2=0.1, crop_size=64))
        assert float(parts.total) == 0.0
        assert float(parts.rate) == 0.0
        assert float(parts.reg) == 0.0
        assert float(parts.distortion) == 0.0

    def test_components_sum_exactly(self):
        torch.manual_seed(2)
        x = synthetic_image(64, seed=2)
        out = _fabricated_output(
            x, torch.rand(1, 2, 4, 4) * 0.9 + 0.05, torch.rand(1, 2, 1, 1) * 0.9 + 0.05,
            torch.randn_like(x) * 0.01, x + torch.randn_like(x) * 0.01,
        )
        parts = compute_loss(x, out, TrainConfig(lambda2=0.05, crop_size=64))
        assert float(parts.total) == float(parts.rate + parts.reg + parts.distortion)

    def test_doubling_lambda2_doubles_distortion_only(self):
        x = synthetic_image(64, seed=3)
        out = _fabricated_output(
            x, torch.full((1, 2, 4, 4), 0.5), torch.full((1, 2, 1, 1), 0.25),
            torch.zeros_like(x), x + 0.01,
        )
        cfg1 = TrainConfig(lambda2=0.05, lambda1=0.0, crop_size=64)
        cfg2 = TrainConfig(lambda2=0.10, lambda1=0.0, crop_size=64)
        p1 = compute_loss(x, out, cfg1)
        p2 = compute_loss(x, out, cfg2)
        assert float(p2.distortion) == pytest.approx(2 * float(p1.distortion), rel=1e-6)
        assert float(p2.rate) == float(p1.rate)

    def test_lambda1_defaults_to_ratio(self):
        cfg = TrainConfig(lambda2=0.2, crop_size=64)
        assert cfg.effective_lambda1() == pytest.approx(0.002)
        assert cfg.effective_lambda1(0.05) == pytest.approx(0.0005)

    def test_reg_norm_variants(self):
        x = synthetic_image(64, seed=4)
        x2 = torch.full_like(x, 0.01)
        out = _fabricated_output(x, torch.ones(1, 2, 4, 4), torch.ones(1, 2, 1, 1), x2, x.clone())
        none_parts = compute_loss(x, out, TrainConfig(lambda2=0.1, reg_norm="none", crop_size=64))
        assert float(none_parts.reg) == 0.0
        l2a = compute_loss(x, out, TrainConfig(lambda2=0.1, lambda1=0.001, crop_size=64))
        l2b = compute_loss(x, out, TrainConfig(lambda2=0.1, lambda1=0.002, crop_size=64))
        assert float(l2b.reg) == pytest.approx(2 * float(l2a.reg), rel=1e-6)
        l1 = compute_loss(x, out, TrainConfig(lambda2=0.1, lambda1=0.001, reg_norm="l1", crop_size=64))
        assert float(l1.reg) == pytest.approx(0.001 * 255 * 0.01, rel=1e-5)

    def test_rate_uses_clamped_likelihoods(self):
        x = synthetic_image(64, seed=5)
        out = _fabricated_output(x, torch.zeros(1, 2, 4, 4), torch.ones(1, 2, 1, 1), torch.zeros_like(x), x.clone())
        parts = compute_loss(x, out, TrainConfig(lambda2=0.1, crop_size=64))
        expected = 32 * -math.log(LIKELIHOOD_FLOOR) / (64 * 64)
        assert float(parts.rate) == pytest.approx(expected, rel=1e-6)

    def test_non_finite_loss_aborts_with_snapshot(self):
        x = synthetic_image(64, seed=6)
        out = _fabricated_output(x, torch.ones(1, 2, 4, 4), torch.ones(1, 2, 1, 1),
                                 torch.zeros_like(x), x + float("nan"))
        with pytest.raises(TrainingDiverged) as err:
            compute_loss(x, out, TrainConfig(lambda2=0.1, crop_size=64))
        assert "lambda2" in err.value.snapshot


class TestDistortionMetric:
    def test_identical_images(self):
        x = synthetic_image(192, seed=7)
        assert float(((x - x) ** 2).mean()) == 0.0
        assert float(msssim(x, x.clone())) == pytest.approx(1.0, abs=1e-6)

    def test_constant_offset_mse(self):
        x = torch.full((1, 3, 32, 32), 0.4)
        x_hat = x + 0.1
        assert float(((x - x_hat) ** 2).mean()) == pytest.approx(0.01, rel=1e-6)

    def test_msssim_on_noise_pairs_low(self):
        g = torch.Generator().manual_seed(8)
        a = torch.rand(1, 3, 192, 192, generator=g)
        b = torch.rand(1, 3, 192, 192, generator=g)
        assert float(msssim(a, b)) < 0.2

    def test_msssim_small_image_rejected(self):
        x = torch.rand(1, 3, 160, 160)
        with pytest.raises(MetricError):
            msssim(x, x)


class TestGradientOracle:
    def test_gradients_match_finite_differences(self):
        from flowcodec.layers import GDN

        from conftest import finite_difference_gradient_check

        torch.manual_seed(9)
        cfg = ModelConfig(num_steps=2, width=6, latent_channels=5, hyper_channels=3, mixture_components=2)
        model = CodecModel(cfg)
        # Move floored parameters strictly inside their domain: finite
        # differences straddle the clamp kink otherwise.
        with torch.no_grad():
            for m in model.modules():
                if isinstance(m, GDN):
                    m.gamma.abs_().add_(0.01)
        x = synthetic_image(64, seed=9)
        tcfg = TrainConfig(lambda2=0.05, crop_size=64)
        checked, _ = finite_difference_gradient_check(model, x, tcfg)
        assert checked >= 20


class TestTrainLoop:
    def _quick_cfg(self, **kw):
        base = dict(lambda2=0.1, batch_size=1, crop_size=64, max_steps=30,
                    log_every=10, checkpoint_every=20, seed=3)
        base.update(kw)
        return TrainConfig(**base)

    def test_seed_fixed_runs_identical(self, tmp_path):
        losses = []
        for run in range(2):
            torch.manual_seed(0)
            cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
            model = CodecModel(cfg)
            data = FixedCrop(synthetic_image(64, seed=10))
            train(model, data, self._quick_cfg(), tmp_path / f"run{run}")
            with open(tmp_path / f"run{run}" / "train_log.csv") as f:
                rows = list(csv.DictReader(f))
            losses.append([r["total"] for r in rows])
        assert losses[0] == losses[1]

    def test_log_columns_and_checkpoints(self, tmp_path):
        torch.manual_seed(1)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        model = CodecModel(cfg)
        paths = train(model, FixedCrop(synthetic_image(64, seed=11)), self._quick_cfg(), tmp_path / "t")
        assert paths[-1].name == "checkpoint_final.npz"
        assert (tmp_path / "t" / "checkpoint_0000020.npz").exists()
        with open(tmp_path / "t" / "train_log.csv") as f:
            header = f.readline().strip().split(",")
        assert header == ["step", "total", "R_bpp", "reg", "D", "lr"]

    def test_divergence_detector(self, tmp_path):
        torch.manual_seed(2)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        model = CodecModel(cfg)

        class ExplodingData:
            def __init__(self):
                self.n = 0

            def sample(self, batch, crop, generator=None):
                self.n += 1
                x = synthetic_image(64, seed=12) * min(1.0, 1e-4 + 0)
                if self.n > 110:
                    # sabotage: rescale a weight so the loss jumps
                    with torch.no_grad():
                        model.qe.tail.conv.weight.fill_(50.0)
                        model.qe.tail.conv.bias.fill_(50.0)
                return synthetic_image(64, seed=12)

        with pytest.raises(TrainingDiverged):
            train(model, ExplodingData(), self._quick_cfg(max_steps=400, log_every=50), tmp_path / "d")
        assert (tmp_path / "d" / "divergence_report.json").exists()

    def test_early_stop(self, tmp_path):
        torch.manual_seed(3)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        model = CodecModel(cfg)
        seen = []

        def stop(step, m):
            seen.append(step)
            return True

        train(model, FixedCrop(synthetic_image(64, seed=13)), self._quick_cfg(), tmp_path / "e", stop_fn=stop)
        assert seen == [10]

    def test_image_folder_source(self, tmp_path):
        from flowcodec.evaluation import save_image

        for i in range(2):
            save_image(synthetic_image(96, seed=20 + i), tmp_path / f"img{i}.png")
        src = ImageFolderCrops(tmp_path)
        batch = src.sample(3, 64)
        assert batch.shape == (3, 3, 64, 64)
        assert float(batch.min()) >= 0 and float(batch.max()) <= 1


class TestVariableRate:
    def _vr_model(self):
        torch.manual_seed(4)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4,
                          lambda_values=(0.1, 0.05, 0.02, 0.01, 0.005))
        return CodecModel(cfg)

    def test_single_element_reduces_to_plain_loss(self):
        model = self._vr_model()
        x = synthetic_image(64, seed=14)
        cfg = TrainConfig(lambda2=0.1, crop_size=64)
        torch.manual_seed(7)
        total, parts = variable_rate_loss(x, model, [0], cfg)
        torch.manual_seed(7)
        out = model(x, "noise", lambda_index=0)
        plain = compute_loss(x, out, cfg, lambda2=model.cfg.lambda_values[0])
        assert float(total.detach()) == pytest.approx(float(plain.total.detach()), rel=1e-6)

    def test_averages_over_set(self):
        model = self._vr_model()
        x = synthetic_image(64, seed=15)
        cfg = TrainConfig(lambda2=0.1, crop_size=64)
        total, parts = variable_rate_loss(x, model, [0, 2, 4], cfg)
        assert len(parts) == 3
        assert float(total.detach()) == pytest.approx(float(np.mean([float(p.total.detach()) for p in parts])), rel=1e-6)

    def test_lambda1_tracks_sampled_lambda2(self):
        cfg = TrainConfig(lambda2=0.1, crop_size=64)
        assert cfg.effective_lambda1(0.005) == pytest.approx(5e-5)


class TestFinetune:
    def test_finetune_runs_and_saves(self, tmp_path):
        torch.manual_seed(5)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        model = CodecModel(cfg)
        data = FixedCrop(synthetic_image(64, seed=16))
        tcfg = TrainConfig(lambda2=0.1, batch_size=1, crop_size=64, max_steps=40,
                           finetune_steps=10, log_every=5, checkpoint_every=1000, seed=6)
        paths = finetune_for_rate(model, 0.01, tcfg, data, tmp_path / "ft")
        assert paths[-1].exists()


class TestConfigFile:
    def test_yaml_roundtrip(self, tmp_path):
        cfg = TrainConfig(lambda2=0.02, distortion="mse", reg_norm="l1", crop_size=128, lambda_set=(0.1, 0.01))
        cfg.save(tmp_path / "c.yaml")
        again = TrainConfig.load(tmp_path / "c.yaml")
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda2=-1)
        with pytest.raises(ValueError):
            TrainConfig(crop_size=60)
        with pytest.raises(ValueError):
            TrainConfig(distortion="msssim", crop_size=128)
        with pytest.raises(ValueError):
            TrainConfig(reg_norm="l3")


class TestPaperScaleConstants:
    def test_published_lambda_ladders(self):
        from flowcodec.training import MSE_LAMBDAS, MSSSIM_LAMBDAS, VARIABLE_RATE_LAMBDAS

        assert MSE_LAMBDAS == (0.1, 0.05, 0.02, 0.01, 0.005, 0.002)
        assert MSSSIM_LAMBDAS == (200.0, 100.0, 40.0, 20.0, 10.0, 4.0)
        assert VARIABLE_RATE_LAMBDAS == (0.1, 0.05, 0.02, 0.01, 0.005)

    def test_full_scale_config_accepted(self):
        cfg = TrainConfig(lambda2=0.1, batch_size=32, crop_size=256, distortion="msssim",
                          max_steps=50000, decay_step=40000)
        assert cfg.batch_size == 32 and cfg.crop_size == 256

    def test_same_lambda_finetune_noop_trend(self, tmp_path):
        # Re-optimizing at the same trade-off should not increase the loss
        # trend (measured over windowed means).
        torch.manual_seed(30)
        cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
        model = CodecModel(cfg)
        data = FixedCrop(synthetic_image(64, seed=30))
        base = TrainConfig(lambda2=0.1, batch_size=1, crop_size=64, max_steps=400,
                           log_every=10, checkpoint_every=10**9, seed=30)
        train(model, data, base, tmp_path / "base")
        ft = TrainConfig(lambda2=0.1, batch_size=1, crop_size=64, max_steps=400,
                         finetune_steps=200, log_every=10, checkpoint_every=10**9, seed=31)
        finetune_for_rate(model, 0.1, ft, data, tmp_path / "ft")
        import csv as _csv

        with open(tmp_path / "ft" / "train_log.csv") as f:
            totals = [float(r["total"]) for r in _csv.DictReader(f)]
        first = np.mean(totals[: len(totals) // 3])
        last = np.mean(totals[-len(totals) // 3 :])
        assert last <= first * 1.10
