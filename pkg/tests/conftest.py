import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from flowcodec.model import CodecModel, ModelConfig


def synthetic_image(size=64, seed=42):
    """Deterministic natural-looking test image: smooth sinusoid mixtures
    plus low-pass noise texture, well inside [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(6):
        fx, fy = rng.uniform(0.5, 4, 2)
        ph = rng.uniform(0, 2 * np.pi, 3)
        amp = rng.uniform(0.05, 0.25)
        for c in range(3):
            img[:, :, c] += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph[c])
    img += 0.15 * gaussian_filter(rng.normal(0, 1, (size, size, 3)), 2.0)
    img = 0.5 + 0.45 * img / np.abs(img).max()
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)


TINY = dict(num_steps=2, width=8, latent_channels=6, hyper_channels=4, mixture_components=3)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    model = CodecModel(tiny_cfg)
    model.eval()
    return model


def finite_difference_gradient_check(model, x, cfg, num_params=24, h=1e-4, rel_tol=1e-3):
    """Central finite differences vs autograd at float64, sampling parameters
    from every top-level module group. Returns (checked, worst_rel_err)."""
    from flowcodec.model import ForwardOutput
    from flowcodec.training import compute_loss

    model.double()
    x = x.double()

    def loss_fn():
        st = model.flow_forward(
            x, "noise",
            e_h=torch.full((1, model.cfg.hyper_channels, 1, 1), 0.13, dtype=torch.float64),
            z_noise=torch.full((1, model.cfg.latent_channels, x.shape[-2] // 16, x.shape[-1] // 16),
                               -0.21, dtype=torch.float64),
        )
        z_lik, h_lik = model.latent_likelihoods(st)
        recon = model.reconstruct(st.z, st.h)
        out = ForwardOutput(state=st, recon=recon, z_likelihood=z_lik, h_likelihood=h_lik)
        return compute_loss(x, out, cfg).total

    loss = loss_fn()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    rng = np.random.default_rng(5)
    groups = {}
    for (name, param), grad in zip(named, grads):
        groups.setdefault(name.split(".")[0], []).append((name, param, grad))
    checked = 0
    worst = 0.0
    for group, entries in groups.items():
        for _ in range(max(2, num_params // max(1, len(groups)))):
            name, param, grad = entries[int(rng.integers(len(entries)))]
            if grad is None:
                continue
            flat_idx = int(rng.integers(param.numel()))
            with torch.no_grad():
                orig = float(param.reshape(-1)[flat_idx])
                param.reshape(-1)[flat_idx] = orig + h
                up = float(loss_fn())
                param.reshape(-1)[flat_idx] = orig - h
                down = float(loss_fn())
                param.reshape(-1)[flat_idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grad.reshape(-1)[flat_idx])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            rel = abs(numeric - analytic) / denom
            worst = max(worst, rel)
            assert rel <= rel_tol, (name, flat_idx, numeric, analytic, rel)
            checked += 1
    return checked, worst
