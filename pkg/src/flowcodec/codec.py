"""End-to-end encoding and decoding against a real bitstream.

Encode: pad, run the flow with rounding, entropy code the hyper latent under
the factorized prior, then the main latent (raster-order autoregressive in
mixture mode), optionally the rounded residual branch, and assemble the
container. Decode parses the container, reverses each payload, and runs the
flow inverse plus quality enhancement.

Bitstream layout (big-endian):

    magic   4s   "ANFC"
    version u16
    flags   u16  bit0 = mixture entropy model, bit1 = residual branch coded
    height  u32  original image height
    width   u32  original image width
    lambda  u8   rate-point index (0xFF for fixed-rate models)
    reserved u8
    hash    8s   model config/weights digest
    payloads     length-prefixed (u32) byte strings: hyper, latent[, residual]

Everything the decoder derives on its own (CDF tables, network outputs that
feed them) is computed through the exact same code path the encoder used, so
decoded symbols match encoder-side symbols bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import coder
from .entropy import mixture_cdf_tables
from .model import CodecModel, config_hash

MAGIC = b"ANFC"
VERSION = 1
FLAG_GMM = 1 << 0
FLAG_RESIDUAL = 1 << 1
LAMBDA_INDEX_NONE = 0xFF
PAD_MULTIPLE = 64
DEFAULT_MAX_PIXELS = 1 << 24

_HEADER = struct.Struct(">4sHHIIBB8s")


class CodecError(Exception):
    """Raised for malformed containers and contract violations."""


@dataclass
class BitstreamContainer:
    """Parsed form of one coded image."""

    height: int
    width: int
    config_hash: bytes
    gmm_mode: bool
    residual: bool
    lambda_index: int | None
    payloads: tuple

    def serialize(self) -> bytes:
        flags = (FLAG_GMM if self.gmm_mode else 0) | (FLAG_RESIDUAL if self.residual else 0)
        expected = 3 if self.residual else 2
        if len(self.payloads) != expected:
            raise CodecError(f"expected {expected} payloads, got {len(self.payloads)}")
        lam = LAMBDA_INDEX_NONE if self.lambda_index is None else int(self.lambda_index)
        head = _HEADER.pack(MAGIC, VERSION, flags, self.height, self.width, lam, 0, self.config_hash)
        parts = [head]
        for payload in self.payloads:
            parts.append(struct.pack(">I", len(payload)))
            parts.append(payload)
        return b"".join(parts)

    @classmethod
    def parse(cls, data: bytes) -> "BitstreamContainer":
        if len(data) < _HEADER.size:
            raise CodecError("container shorter than header")
        magic, version, flags, height, width, lam, _, digest = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CodecError("bad magic")
        if version != VERSION:
            raise CodecError(f"unsupported container version {version}")
        residual = bool(flags & FLAG_RESIDUAL)
        payloads = []
        offset = _HEADER.size
        for _ in range(3 if residual else 2):
            if offset + 4 > len(data):
                raise CodecError("truncated payload table")
            (length,) = struct.unpack_from(">I", data, offset)
            offset += 4
            if offset + length > len(data):
                raise CodecError("truncated payload")
            payloads.append(data[offset : offset + length])
            offset += length
        if offset != len(data):
            raise CodecError("trailing bytes after payloads")
        return cls(
            height=height,
            width=width,
            config_hash=digest,
            gmm_mode=bool(flags & FLAG_GMM),
            residual=residual,
            lambda_index=None if lam == LAMBDA_INDEX_NONE else lam,
            payloads=tuple(payloads),
        )

    @property
    def total_bytes(self):
        return len(self.serialize())

    def bpp(self):
        return self.total_bytes * 8.0 / (self.height * self.width)


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------

def pad_reflect(x, multiple=PAD_MULTIPLE):
    """Reflect-pad bottom/right to the next multiple; returns (padded, dims).

    Reflection never repeats more than dim-1 pixels per pass, so small inputs
    are padded in several passes.
    """
    h, w = int(x.shape[-2]), int(x.shape[-1])
    ph = (-h) % multiple
    pw = (-w) % multiple
    out = x
    while ph or pw:
        th = min(ph, out.shape[-2] - 1)
        tw = min(pw, out.shape[-1] - 1)
        out = F.pad(out, (0, tw, 0, th), mode="reflect")
        ph -= th
        pw -= tw
    return out, (h, w)


def crop(x, dims):
    h, w = dims
    return x[..., :h, :w]


# ---------------------------------------------------------------------------
# Payload coding helpers
# ---------------------------------------------------------------------------

@torch.no_grad()
def _encode_hyper(model, h_sym):
    tables = model.hyper_prior.cdf_tables()
    enc = coder.RangeEncoder()
    for c in range(h_sym.shape[0]):
        table = tables[c]
        for v in h_sym[c].reshape(-1):
            coder.encode_symbol(enc, table, int(v))
    return enc.finish()


@torch.no_grad()
def _decode_hyper(model, payload, shape):
    tables = model.hyper_prior.cdf_tables()
    dec = coder.RangeDecoder(payload)
    c, h, w = shape
    out = np.zeros(shape, dtype=np.int64)
    for ch in range(c):
        table = tables[ch]
        flat = out[ch].reshape(-1)
        for i in range(h * w):
            flat[i] = coder.decode_symbol(dec, table)
    return out


def _position_params(model, buf, feats, i, j, cond):
    """Mixture parameters at one raster position from the causal buffer.

    This single routine serves both encode and decode so the float results
    (and therefore the quantized tables) are bitwise identical on both sides.
    """
    ctx_conv = model.context.conv
    patch = buf[:, :, i : i + 5, j : j + 5]
    ctx = F.conv2d(patch, ctx_conv.weight * ctx_conv.mask, ctx_conv.bias)
    raw = model.param_head(torch.cat([ctx, feats[:, :, i : i + 1, j : j + 1]], dim=1), cond)
    p = model._raw_to_params(raw)
    w = p.weights[0, :, :, 0, 0].T.double().numpy()
    mu = p.means[0, :, :, 0, 0].T.double().numpy()
    s = p.scales[0, :, :, 0, 0].T.double().numpy()
    return w, mu, s


@torch.no_grad()
def _code_latent_gmm(model, h_hat, z_shape, cond, symbols=None, payload=None):
    """Raster-order autoregressive coding of the main latent.

    With ``symbols`` given, encodes and returns bytes; with ``payload``
    given, decodes and returns the symbol array. The causal buffer is filled
    position by position in both directions, so the context inputs agree.
    """
    encode = symbols is not None
    n, zh, zw = z_shape
    feats = model.hyper.features(h_hat, cond)
    buf = h_hat.new_zeros(1, n, zh + 4, zw + 4)
    if encode:
        rc = coder.RangeEncoder()
    else:
        rc = coder.RangeDecoder(payload)
        out = np.zeros(z_shape, dtype=np.int64)
    for i in range(zh):
        for j in range(zw):
            w, mu, s = _position_params(model, buf, feats, i, j, cond)
            tables = mixture_cdf_tables(w, mu, s)
            if encode:
                for c in range(n):
                    coder.encode_symbol(rc, tables[c], int(symbols[c, i, j]))
                buf[0, :, i + 2, j + 2] = torch.from_numpy(symbols[:, i, j]).to(buf.dtype)
            else:
                vals = [coder.decode_symbol(rc, tables[c]) for c in range(n)]
                out[:, i, j] = vals
                buf[0, :, i + 2, j + 2] = torch.tensor(vals, dtype=buf.dtype)
    if encode:
        return rc.finish()
    return out


_CHUNK = 4096


@torch.no_grad()
def _code_gaussian_elements(scales, symbols=None, payload=None, means=None):
    """Chunked coding of elements under zero-mean Gaussians with per-element
    scales (used for the single-Gaussian latent path and the residual branch)."""
    flat_s = scales.reshape(-1, 1)
    total = flat_s.shape[0]
    if means is None:
        flat_mu = np.zeros_like(flat_s)
    else:
        flat_mu = means.reshape(-1, 1)
    weights = np.ones_like(flat_s)
    encode = symbols is not None
    if encode:
        rc = coder.RangeEncoder()
        flat_v = symbols.reshape(-1)
    else:
        rc = coder.RangeDecoder(payload)
        out = np.zeros(total, dtype=np.int64)
    for start in range(0, total, _CHUNK):
        stop = min(start + _CHUNK, total)
        tables = mixture_cdf_tables(weights[start:stop], flat_mu[start:stop], flat_s[start:stop])
        if encode:
            for k, table in enumerate(tables):
                coder.encode_symbol(rc, table, int(flat_v[start + k]))
        else:
            for k, table in enumerate(tables):
                out[start + k] = coder.decode_symbol(rc, table)
    if encode:
        return rc.finish()
    return out


# ---------------------------------------------------------------------------
# Image-level encode / decode
# ---------------------------------------------------------------------------

def _validate_image(x, max_pixels):
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise CodecError(f"expected a (1, 3, H, W) RGB tensor, got {tuple(x.shape)}")
    if x.shape[-2] * x.shape[-1] > max_pixels:
        raise CodecError(f"image exceeds the configured budget of {max_pixels} pixels")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise CodecError(f"pixel values outside [0, 1]: [{lo:.4f}, {hi:.4f}]")


@torch.no_grad()
def encode_residual(model: CodecModel, x2, z_hat, cond=None):
    """Entropy code the rounded residual branch under the zero-mean Gaussian
    conditioned on the coded latent (through the synthesis scale head)."""
    if not model.cfg.residual_head:
        raise CodecError("residual mode requires a model trained with the residual scale head")
    scales = model.residual_scales(z_hat, cond)
    symbols = np.rint(x2[0].numpy() * model.cfg.residual_scale).astype(np.int64)
    return _code_gaussian_elements(scales[0].double().numpy(), symbols=symbols)


@torch.no_grad()
def encode_image(model: CodecModel, x, residual=False, lambda_index=None, max_pixels=DEFAULT_MAX_PIXELS, return_state=False):
    """Encode one image tensor to a :class:`BitstreamContainer`."""
    model.eval()
    _validate_image(x, max_pixels)
    if residual and not model.cfg.residual_head:
        raise CodecError("residual mode requires a model trained with the residual scale head")
    cond = model.condition(lambda_index)
    x_pad, dims = pad_reflect(x)
    state = model.flow_forward(x_pad, "round", cond=cond)
    h_sym = state.h[0].numpy().astype(np.int64)
    z_sym = state.z[0].numpy().astype(np.int64)

    payloads = [_encode_hyper(model, h_sym)]
    if model.cfg.entropy_mode == "gmm":
        payloads.append(_code_latent_gmm(model, state.h, z_sym.shape, cond, symbols=z_sym))
    else:
        _, sigma = model.hyper.gaussian_params(state.h, cond)
        payloads.append(_code_gaussian_elements(sigma[0].double().numpy(), symbols=z_sym))
    if residual:
        payloads.append(encode_residual(model, state.x, state.z, cond))

    container = BitstreamContainer(
        height=dims[0],
        width=dims[1],
        config_hash=config_hash(model),
        gmm_mode=model.cfg.entropy_mode == "gmm",
        residual=residual,
        lambda_index=lambda_index,
        payloads=tuple(payloads),
    )
    if return_state:
        return container, state
    return container


def reconstruct_image(model: CodecModel, z_hat, h_hat, x2, dims, cond=None):
    """Shared tail of decoding: inverse flow, QE, crop, clamp."""
    recon = model.reconstruct(z_hat, h_hat, x2=x2, cond=cond)
    return crop(recon, dims).clamp(0.0, 1.0)


@torch.no_grad()
def decode_image(model: CodecModel, container: BitstreamContainer):
    """Decode a container back to a (1, 3, H, W) image tensor in [0, 1]."""
    model.eval()
    if container.config_hash != config_hash(model):
        raise CodecError("config hash mismatch: bitstream was produced by a different model")
    if container.gmm_mode != (model.cfg.entropy_mode == "gmm"):
        raise CodecError("entropy mode flag does not match the model")
    cond = model.condition(container.lambda_index)
    ph = -(-container.height // PAD_MULTIPLE) * PAD_MULTIPLE
    pw = -(-container.width // PAD_MULTIPLE) * PAD_MULTIPLE
    n, m = model.cfg.latent_channels, model.cfg.hyper_channels
    h_shape = (m, ph // 64, pw // 64)
    z_shape = (n, ph // 16, pw // 16)

    h_sym = _decode_hyper(model, container.payloads[0], h_shape)
    h_hat = torch.from_numpy(h_sym).to(torch.float32).unsqueeze(0)
    if container.gmm_mode:
        z_sym = _code_latent_gmm(model, h_hat, z_shape, cond, payload=container.payloads[1])
    else:
        _, sigma = model.hyper.gaussian_params(h_hat, cond)
        z_sym = _code_gaussian_elements(sigma[0].double().numpy(), payload=container.payloads[1])
        z_sym = z_sym.reshape(z_shape)
    z_hat = torch.from_numpy(np.asarray(z_sym).reshape(z_shape)).to(torch.float32).unsqueeze(0)

    x2 = None
    if container.residual:
        scales = model.residual_scales(z_hat, cond)
        r_sym = _code_gaussian_elements(scales[0].double().numpy(), payload=container.payloads[2])
        x2 = torch.from_numpy(r_sym.reshape(1, 3, ph, pw)).to(torch.float32) / model.cfg.residual_scale

    return reconstruct_image(model, z_hat, h_hat, x2, (container.height, container.width), cond)


def to_uint8(x):
    """8-bit quantization used for PSNR and PNG output."""
    return torch.round(torch.clamp(x, 0.0, 1.0) * 255.0).to(torch.uint8)


@torch.no_grad()
def estimate_payload_bits(model: CodecModel, state, cond=None, residual=False):
    """Model-side code length estimate (clamped likelihoods) in bits."""
    from .entropy import gauss_uniform_pmf, rate_bits

    z_lik, h_lik = model.latent_likelihoods(state, cond)
    bits = float(rate_bits(z_lik, h_lik))
    if residual:
        scales = model.residual_scales(state.z, cond)
        sym = torch.round(state.x * model.cfg.residual_scale)
        bits += float(rate_bits(gauss_uniform_pmf(sym, torch.zeros_like(sym), scales)))
    return bits
