"""Model assembly, checkpoint archive, config hashing."""

import json

import numpy as np
import pytest
import torch

from flowcodec.model import (
    CHECKPOINT_FORMAT,
    CodecModel,
    ModelConfig,
    config_hash,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

from conftest import synthetic_image


def test_config_json_roundtrip():
    cfg = ModelConfig(num_steps=3, width=16, latent_channels=10, hyper_channels=6,
                      lambda_values=(0.1, 0.01), residual_head=True)
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(entropy_mode="laplace")
    with pytest.raises(ValueError):
        ModelConfig(mixture_components=0)


def test_coupling_parameters_disjoint(tiny_model):
    # Each autoencoding transform's encoder and decoder hold separate weights.
    for pair in tiny_model.couplings:
        enc_ids = {id(p) for p in pair.enc_net.parameters()}
        dec_ids = {id(p) for p in pair.dec_net.parameters()}
        assert not enc_ids & dec_ids
    all_ids = [id(p) for pair in tiny_model.couplings for p in pair.parameters()]
    assert len(all_ids) == len(set(all_ids))


def test_forward_output_shapes(tiny_model):
    x = synthetic_image(64, seed=30)
    out = tiny_model(x, "noise")
    assert out.state.x.shape == x.shape
    assert out.recon.shape == x.shape
    assert out.z_likelihood.shape == out.state.z.shape
    assert out.h_likelihood.shape == out.state.h.shape


def test_residual_nll_only_with_head():
    torch.manual_seed(0)
    cfg = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4, residual_head=True)
    model = CodecModel(cfg)
    out = model(synthetic_image(64, seed=31), "noise")
    assert out.residual_nll is not None
    cfg2 = ModelConfig(num_steps=1, width=8, latent_channels=6, hyper_channels=4)
    out2 = CodecModel(cfg2)(synthetic_image(64, seed=31), "noise")
    assert out2.residual_nll is None


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    save_checkpoint(tiny_model, path, step=123)
    again = load_checkpoint(path)
    assert again.cfg == tiny_model.cfg
    for (na, pa), (nb, pb) in zip(tiny_model.state_dict().items(), again.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    with np.load(path) as archive:
        assert int(archive["__format__"]) == CHECKPOINT_FORMAT
        assert int(archive["__step__"]) == 123
        json.loads(bytes(archive["__config__"]).decode())


def test_checkpoint_bad_format_rejected(tmp_path, tiny_model):
    path = tmp_path / "model.npz"
    save_checkpoint(tiny_model, path)
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    arrays["__format__"] = np.int64(99)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_config_hash_tracks_weights_and_config(tiny_model, tiny_cfg):
    h0 = config_hash(tiny_model)
    assert len(h0) == 8
    assert config_hash(tiny_model) == h0
    with torch.no_grad():
        next(tiny_model.parameters()).add_(1e-3)
    assert config_hash(tiny_model) != h0
    torch.manual_seed(0)
    other_cfg = ModelConfig(**{**tiny_cfg.__dict__, "mixture_components": 2})
    assert config_hash(CodecModel(other_cfg)) != h0


def test_parameter_count_positive(tiny_model):
    assert parameter_count(tiny_model) > 0
