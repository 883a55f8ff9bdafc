"""Fast invariant suite behind the ``selftest`` CLI subcommand.

A trimmed, dependency-free (no pytest) version of the invariants the full
test suite covers; each check returns quietly or raises AssertionError.
"""

from __future__ import annotations

import numpy as np
import torch

from . import coder
from .codec import BitstreamContainer
from .entropy import DistributionParams, FactorizedPrior, build_cdf_table, gauss_uniform_pmf, gmm_uniform_pmf
from .layers import GDN, ContextModel
from .metrics import bd_rate


def _check_coder_roundtrip():
    rng = np.random.default_rng(1)
    tables, symbols = [], []
    for _ in range(2000):
        k = int(rng.integers(2, 32))
        pmf = rng.random(k) + 1e-4
        table = build_cdf_table(pmf, int(rng.integers(-40, 40)), precision=int(rng.integers(8, 17)))
        tables.append(table)
        symbols.append(int(rng.integers(table.support_min - 4, table.support_max + 5)))
    data = coder.encode_symbols(symbols, tables)
    assert coder.decode_symbols(data, tables) == symbols


def _check_autoregressive_provider():
    rng = np.random.default_rng(2)
    base = [build_cdf_table(rng.random(8) + 1e-3, -4) for _ in range(4)]
    symbols = [int(rng.integers(-4, 4)) for _ in range(500)]
    tables = [base[0]]
    for s in symbols[:-1]:
        tables.append(base[s % 4])
    data = coder.encode_symbols(symbols, tables)

    def provider(decoded):
        if not decoded:
            return base[0]
        return base[decoded[-1] % 4]

    assert coder.decode_symbols(data, provider, n=len(symbols)) == symbols


def _check_pmf_normalization():
    torch.manual_seed(3)
    v = torch.arange(-60, 61, dtype=torch.float64)
    for _ in range(20):
        mu = torch.randn(1, dtype=torch.float64)
        sigma = torch.rand(1, dtype=torch.float64) + 0.05
        total = float(gauss_uniform_pmf(v, mu, sigma).sum())
        assert abs(total - 1.0) < 1e-5, total


def _check_gmm_degeneracy():
    torch.manual_seed(4)
    v = torch.randn(1, 64, 1, dtype=torch.float64)
    mu = torch.randn(1, 1, 64, 1, dtype=torch.float64)
    sigma = torch.rand(1, 1, 64, 1, dtype=torch.float64) + 0.1
    params = DistributionParams(weights=torch.ones_like(mu), means=mu, scales=sigma)
    single = gauss_uniform_pmf(v, mu.squeeze(1), sigma.squeeze(1))
    mixture = gmm_uniform_pmf(v, params)
    assert float((single - mixture).abs().max()) <= 1e-12


@torch.no_grad()
def _check_causality():
    torch.manual_seed(5)
    ctx = ContextModel(2, 4)
    z = torch.randn(1, 2, 6, 6)
    base = ctx(z)
    bumped = z.clone()
    bumped[0, :, 3, 3] += 1.0
    out = ctx(bumped)
    flat_idx = 3 * 6 + 3
    diff = (out - base).abs().sum(dim=1).flatten()
    assert float(diff[: flat_idx + 1].max()) == 0.0


@torch.no_grad()
def _check_gdn_roundtrip():
    torch.manual_seed(6)
    gdn = GDN(4)
    igdn = GDN(4, inverse=True)
    gdn.gamma.mul_(0.1)
    igdn.beta.copy_(gdn.beta)
    igdn.gamma.copy_(gdn.gamma)
    x = torch.empty(1, 4, 8, 8).uniform_(-1, 1)
    err = float((igdn(gdn(x)) - x).abs().max())
    assert err < 1e-4, err


@torch.no_grad()
def _check_factorized_prior():
    torch.manual_seed(7)
    prior = FactorizedPrior(3)
    lo, hi = prior.support_bounds()
    grid = torch.arange(int(lo.min()), int(hi.max()) + 1, dtype=torch.float32)
    pmf = prior.likelihood(grid.reshape(1, 1, -1, 1).expand(1, 3, -1, 1))
    sums = pmf.sum(dim=2).flatten()
    assert float((sums - 1).abs().max()) < 1e-4, sums


def _check_container_roundtrip():
    c = BitstreamContainer(
        height=500, width=333, config_hash=b"12345678", gmm_mode=True,
        residual=True, lambda_index=2, payloads=(b"aa", b"", b"xyz"),
    )
    assert BitstreamContainer.parse(c.serialize()) == c


def _check_bd_rate_oracle():
    q = [30.0, 32.0, 34.0, 36.0]
    r = [0.2, 0.4, 0.8, 1.6]
    assert abs(bd_rate(r, q, r, q)) < 1e-9
    shifted = [0.9 * v for v in r]
    assert abs(bd_rate(shifted, q, r, q) + 10.0) < 0.1


CHECKS = [
    ("coder_roundtrip", _check_coder_roundtrip),
    ("autoregressive_provider", _check_autoregressive_provider),
    ("pmf_normalization", _check_pmf_normalization),
    ("gmm_k1_degeneracy", _check_gmm_degeneracy),
    ("masked_context_causality", _check_causality),
    ("gdn_roundtrip", _check_gdn_roundtrip),
    ("factorized_prior_normalization", _check_factorized_prior),
    ("container_roundtrip", _check_container_roundtrip),
    ("bd_rate_oracle", _check_bd_rate_oracle),
]


def run(verbose=True):
    """Run all checks; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # noqa: BLE001 - report every failure kind
            status = f"FAIL ({exc})"
            failures += 1
        if verbose:
            print(f"[{status.split()[0]:4s}] {name}" + ("" if status == "PASS" else f": {status}"))
    return failures
