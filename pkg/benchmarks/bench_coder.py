"""Benchmark the compiled range coder backend against the pure-Python one.

Run:  python3 benchmarks/bench_coder.py [num_symbols]

Both backends produce identical bytes; the extension only buys speed in the
per-symbol register arithmetic.
"""

import sys
import time

import numpy as np

from flowcodec.coder import encode_symbols, pycoder
from flowcodec.entropy import build_cdf_table

try:
    from flowcodec.coder import _rc

    BACKENDS = [("compiled", _rc), ("python", pycoder)]
except ImportError:
    BACKENDS = [("python", pycoder)]


def make_workload(n, seed=0):
    rng = np.random.default_rng(seed)
    tables = []
    for _ in range(64):
        pmf = rng.random(int(rng.integers(8, 64))) + 1e-4
        tables.append(build_cdf_table(pmf, int(rng.integers(-20, 20))))
    ids = rng.integers(0, len(tables), size=n)
    symbols = np.array(
        [rng.integers(tables[i].support_min, tables[i].support_max + 1) for i in ids]
    )
    return symbols, [tables[i] for i in ids]


def run_backend(mod, symbols, tables):
    enc = mod.RangeEncoder()
    for v, t in zip(symbols, tables):
        enc.encode_cdf(t.quantized_cdf, int(v) - t.support_min + 1)
    data = enc.finish()
    dec = mod.RangeDecoder(data)
    out = [dec.decode_cdf(t.quantized_cdf) + t.support_min - 1 for t in tables]
    assert out == [int(v) for v in symbols]
    return data


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    symbols, tables = make_workload(n)
    print(f"workload: {n} symbols, 64 distinct tables")
    results = {}
    reference = None
    for name, mod in BACKENDS:
        t0 = time.perf_counter()
        data = run_backend(mod, symbols, tables)
        dt = time.perf_counter() - t0
        results[name] = dt
        if reference is None:
            reference = data
        else:
            assert data == reference, "backends disagree"
        print(f"{name:9s} {dt:8.3f} s   {n / dt / 1e3:8.1f} ksym/s (encode+decode)")
    if len(results) == 2:
        print(f"speedup: {results['python'] / results['compiled']:.1f}x")


if __name__ == "__main__":
    main()
