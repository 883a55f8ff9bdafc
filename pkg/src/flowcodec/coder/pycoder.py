"""Pure-Python range coder backend.

A 32-bit range coder with byte-wise renormalization and carry propagation.
The byte output is big-endian in the sense that the most significant bytes
of the coding interval are emitted first. The compiled backend in ``_rc.pyx``
implements the identical algorithm; the two must stay byte-for-byte equal
(pinned by the shipped test vectors).

State invariants:
  * ``range`` stays in [2**24, 2**32) between operations,
  * ``low`` stays below 2**33, so a carry is a single bit,
  * with ``low`` starting at 0 and ``range`` at 2**32 - 1, the first output
    byte is always 0; the decoder skips it.

Cumulative frequency tables are 1-D ``uint32`` arrays ``cdf`` with
``cdf[0] == 0``, strictly increasing entries, and ``cdf[-1] == 2**precision``
with ``precision <= 16`` (so ``range // total >= 1`` always holds).
"""

from __future__ import annotations

import numpy as np

from ._exceptions import DecodeError

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1
_MAX_TOTAL_BITS = 16


class RangeEncoder:
    """Encodes a sequence of (cdf, index) pairs and raw bits into bytes."""

    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._pending = 0
        self._out = bytearray()
        self._finished = False

    def _shift_low(self):
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            if self._pending:
                byte = (0xFF + carry) & 0xFF
                self._out.extend(bytes([byte]) * self._pending)
                self._pending = 0
            self._cache = (self._low >> 24) & 0xFF
        else:
            self._pending += 1
        self._low = (self._low << 8) & _MASK32

    def encode_cdf(self, cdf, index):
        """Encode bucket ``index`` of the cumulative table ``cdf``."""
        if self._finished:
            raise RuntimeError("encoder already finished")
        cum = int(cdf[index])
        freq = int(cdf[index + 1]) - cum
        total = int(cdf[-1])
        if freq <= 0 or total > (1 << _MAX_TOTAL_BITS):
            raise ValueError(f"invalid cdf bucket: freq={freq} total={total}")
        r = self._range // total
        self._low += cum * r
        self._range = freq * r
        while self._range < _TOP:
            self._shift_low()
            self._range = (self._range << 8) & _MASK32

    def encode_bits(self, value, nbits):
        """Encode ``nbits`` raw bits of ``value``, most significant first."""
        if self._finished:
            raise RuntimeError("encoder already finished")
        if value < 0 or value >> nbits:
            raise ValueError(f"value {value} does not fit in {nbits} bits")
        for i in range(nbits - 1, -1, -1):
            self._range >>= 1
            if (value >> i) & 1:
                self._low += self._range
            while self._range < _TOP:
                self._shift_low()
                self._range = (self._range << 8) & _MASK32

    def finish(self):
        """Flush the remaining interval state and return the byte string."""
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self._out)


class RangeDecoder:
    """Decodes the byte output of :class:`RangeEncoder`.

    Reading past the end of the stream raises :class:`DecodeError`; a valid
    complete stream never over-reads because the decoder's renormalization
    schedule mirrors the encoder's exactly.
    """

    def __init__(self, data):
        self._data = bytes(data)
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        for _ in range(5):
            # The first byte is the encoder's initial zero cache byte; it is
            # shifted out of the 32-bit code window.
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self):
        if self._pos >= len(self._data):
            raise DecodeError("bitstream truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_cdf(self, cdf):
        """Decode one bucket index against the cumulative table ``cdf``."""
        total = int(cdf[-1])
        r = self._range // total
        f = self._code // r
        if f >= total:
            f = total - 1
        index = int(np.searchsorted(cdf, f, side="right")) - 1
        cum = int(cdf[index])
        freq = int(cdf[index + 1]) - cum
        self._code -= cum * r
        self._range = freq * r
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range = (self._range << 8) & _MASK32
        return index

    def decode_bits(self, nbits):
        """Decode ``nbits`` raw bits, most significant first."""
        value = 0
        for _ in range(nbits):
            self._range >>= 1
            bit = 1 if self._code >= self._range else 0
            if bit:
                self._code -= self._range
            value = (value << 1) | bit
            while self._range < _TOP:
                self._code = ((self._code << 8) | self._next_byte()) & _MASK32
                self._range = (self._range << 8) & _MASK32
        return value
