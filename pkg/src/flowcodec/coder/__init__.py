"""Entropy coding backend with compiled hot path and pure-Python fallback.

The inner per-symbol loop dominates encode/decode time, so it lives in a
Cython extension (``flowcodec.coder._rc``). When the extension is missing
(or ``FLOWCODEC_PURE_PYTHON=1`` is set) the pure-Python implementation in
``pycoder`` is selected instead; the two produce identical bytes.

On top of the backend primitives this module implements the symbol layer:
mapping integer symbols to cumulative-table buckets, with two tail-escape
buckets per table followed by a 32-bit zigzag raw value for symbols outside
the table support.

Tables are duck-typed: anything with ``support_min``, ``support_max``,
``quantized_cdf`` (uint32, first entry 0, last entry ``2**precision``) and
``precision`` works, e.g. :class:`flowcodec.entropy.CdfTable`.
"""

from __future__ import annotations

import math
import os

from . import pycoder
from ._exceptions import CoderError, DecodeError

if os.environ.get("FLOWCODEC_PURE_PYTHON"):
    _backend = pycoder
    BACKEND = "python"
else:
    try:
        from . import _rc as _backend

        BACKEND = "compiled"
    except ImportError:
        _backend = pycoder
        BACKEND = "python"

RangeEncoder = _backend.RangeEncoder
RangeDecoder = _backend.RangeDecoder

RAW_VALUE_BITS = 32
_RAW_LIMIT = 1 << (RAW_VALUE_BITS - 1)

__all__ = [
    "BACKEND",
    "CoderError",
    "DecodeError",
    "RangeDecoder",
    "RangeEncoder",
    "RAW_VALUE_BITS",
    "decode_symbols",
    "encode_symbols",
    "estimated_vs_actual",
    "pycoder",
]


def _zigzag(v):
    return (v << 1) if v >= 0 else (-(v << 1) - 1)


def _unzigzag(u):
    return (u >> 1) if (u & 1) == 0 else -((u + 1) >> 1)


def encode_symbol(encoder, table, value):
    """Encode one integer against ``table``, escaping out-of-support values."""
    lo, hi = table.support_min, table.support_max
    n = hi - lo + 1
    if value < lo:
        index = 0
    elif value > hi:
        index = n + 1
    else:
        index = value - lo + 1
    encoder.encode_cdf(table.quantized_cdf, index)
    if index == 0 or index == n + 1:
        if not -_RAW_LIMIT <= value < _RAW_LIMIT:
            raise ValueError(f"escape value {value} exceeds {RAW_VALUE_BITS}-bit raw range")
        encoder.encode_bits(_zigzag(value), RAW_VALUE_BITS)


def decode_symbol(decoder, table):
    """Inverse of :func:`encode_symbol`."""
    lo, hi = table.support_min, table.support_max
    n = hi - lo + 1
    index = decoder.decode_cdf(table.quantized_cdf)
    if index == 0 or index == n + 1:
        return _unzigzag(decoder.decode_bits(RAW_VALUE_BITS))
    return lo + index - 1


def encode_symbols(symbols, tables):
    """Encode ``symbols[i]`` against ``tables[i]`` and return the bytes.

    ``tables`` may also be a single table shared by every symbol.
    """
    encoder = RangeEncoder()
    if hasattr(tables, "quantized_cdf"):
        for v in symbols:
            encode_symbol(encoder, tables, int(v))
    else:
        if len(tables) != len(symbols):
            raise ValueError("need one table per symbol")
        for v, t in zip(symbols, tables):
            encode_symbol(encoder, t, int(v))
    return encoder.finish()


def decode_symbols(data, tables, n=None):
    """Decode ``n`` symbols from ``data``.

    ``tables`` is a single shared table (``n`` required), a sequence of
    per-symbol tables, or a pull-based provider: a callable returning the
    table for the next symbol, which enables autoregressive conditioning on
    previously decoded symbols.
    """
    decoder = RangeDecoder(data)
    out = []
    if hasattr(tables, "quantized_cdf"):
        if n is None:
            raise ValueError("n is required with a shared table")
        for _ in range(n):
            out.append(decode_symbol(decoder, tables))
    elif callable(tables):
        if n is None:
            raise ValueError("n is required with a table provider")
        for _ in range(n):
            out.append(decode_symbol(decoder, tables(out)))
    else:
        for t in tables:
            out.append(decode_symbol(decoder, t))
    return out


def estimated_vs_actual(symbols, tables):
    """Return ``(bits_estimated, bits_actual)`` for a symbol sequence.

    The estimate is the information content of the symbols under the
    quantized tables (escapes cost their bucket plus the raw value bits);
    the actual figure is the measured length of the encoded payload.
    """
    data = encode_symbols(symbols, tables)
    shared = hasattr(tables, "quantized_cdf")
    est = 0.0
    for i, v in enumerate(symbols):
        t = tables if shared else tables[i]
        lo, hi = t.support_min, t.support_max
        n = hi - lo + 1
        v = int(v)
        if v < lo:
            index = 0
        elif v > hi:
            index = n + 1
        else:
            index = v - lo + 1
        cdf = t.quantized_cdf
        freq = int(cdf[index + 1]) - int(cdf[index])
        est += -math.log2(freq / float(cdf[-1]))
        if index == 0 or index == n + 1:
            est += RAW_VALUE_BITS
    return est, len(data) * 8
