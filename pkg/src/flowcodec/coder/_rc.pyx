# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder backend.

Byte-for-byte identical to ``pycoder``; see that module for the algorithm
contract. This version keeps the register arithmetic in C integers, which is
what makes the per-symbol loop cheap.
"""

from libc.stdint cimport uint8_t, uint32_t, uint64_t

from ._exceptions import DecodeError

cdef uint32_t _TOP = 1u << 24
cdef uint64_t _MASK32 = 0xFFFFFFFFu


cdef class RangeEncoder:
    cdef uint64_t _low
    cdef uint32_t _range
    cdef uint8_t _cache
    cdef uint64_t _pending
    cdef bytearray _out
    cdef bint _finished

    def __cinit__(self):
        self._low = 0
        self._range = 0xFFFFFFFFu
        self._cache = 0
        self._pending = 0
        self._out = bytearray()
        self._finished = False

    cdef void _shift_low(self):
        cdef uint64_t carry
        cdef uint8_t byte
        if self._low < 0xFF000000u or self._low > _MASK32:
            carry = self._low >> 32
            self._out.append(<uint8_t> ((self._cache + carry) & 0xFF))
            if self._pending:
                byte = <uint8_t> ((0xFF + carry) & 0xFF)
                self._out.extend(bytes([byte]) * self._pending)
                self._pending = 0
            self._cache = <uint8_t> ((self._low >> 24) & 0xFF)
        else:
            self._pending += 1
        self._low = (self._low << 8) & _MASK32

    def encode_cdf(self, const uint32_t[:] cdf, Py_ssize_t index):
        cdef uint32_t cum, freq, total, r
        if self._finished:
            raise RuntimeError("encoder already finished")
        cum = cdf[index]
        freq = cdf[index + 1] - cum
        total = cdf[cdf.shape[0] - 1]
        if freq == 0 or total > (1u << 16):
            raise ValueError("invalid cdf bucket")
        r = self._range / total
        self._low += <uint64_t> cum * r
        self._range = freq * r
        while self._range < _TOP:
            self._shift_low()
            self._range = <uint32_t> ((<uint64_t> self._range << 8) & _MASK32)

    def encode_bits(self, value, Py_ssize_t nbits):
        cdef uint64_t v = value
        cdef Py_ssize_t i
        if self._finished:
            raise RuntimeError("encoder already finished")
        if nbits < 64 and (v >> nbits):
            raise ValueError("value does not fit in nbits")
        for i in range(nbits - 1, -1, -1):
            self._range >>= 1
            if (v >> i) & 1:
                self._low += self._range
            while self._range < _TOP:
                self._shift_low()
                self._range = <uint32_t> ((<uint64_t> self._range << 8) & _MASK32)

    def finish(self):
        cdef int i
        if not self._finished:
            for i in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self._out)


cdef class RangeDecoder:
    cdef bytes _data
    cdef const uint8_t* _buf
    cdef Py_ssize_t _len
    cdef Py_ssize_t _pos
    cdef uint32_t _range
    cdef uint32_t _code

    def __cinit__(self, data):
        cdef int i
        self._data = bytes(data)
        self._buf = <const uint8_t*> self._data
        self._len = len(self._data)
        self._pos = 0
        self._range = 0xFFFFFFFFu
        self._code = 0
        for i in range(5):
            self._code = <uint32_t> (((<uint64_t> self._code << 8) | self._next_byte()) & _MASK32)

    cdef uint8_t _next_byte(self) except? 0xFF:
        cdef uint8_t b
        if self._pos >= self._len:
            raise DecodeError("bitstream truncated")
        b = self._buf[self._pos]
        self._pos += 1
        return b

    def decode_cdf(self, const uint32_t[:] cdf):
        cdef uint32_t total, r, f, cum, freq
        cdef Py_ssize_t lo, hi, mid
        total = cdf[cdf.shape[0] - 1]
        r = self._range / total
        f = self._code / r
        if f >= total:
            f = total - 1
        # Find index with cdf[index] <= f < cdf[index + 1].
        lo = 0
        hi = cdf.shape[0] - 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[mid] <= f:
                lo = mid
            else:
                hi = mid
        cum = cdf[lo]
        freq = cdf[lo + 1] - cum
        self._code -= cum * r
        self._range = freq * r
        while self._range < _TOP:
            self._code = <uint32_t> (((<uint64_t> self._code << 8) | self._next_byte()) & _MASK32)
            self._range = <uint32_t> ((<uint64_t> self._range << 8) & _MASK32)
        return lo

    def decode_bits(self, Py_ssize_t nbits):
        cdef uint64_t value = 0
        cdef Py_ssize_t i
        cdef int bit
        for i in range(nbits):
            self._range >>= 1
            bit = 1 if self._code >= self._range else 0
            if bit:
                self._code -= self._range
            value = (value << 1) | <uint64_t> bit
            while self._range < _TOP:
                self._code = <uint32_t> (((<uint64_t> self._code << 8) | self._next_byte()) & _MASK32)
                self._range = <uint32_t> ((<uint64_t> self._range << 8) & _MASK32)
        return value
