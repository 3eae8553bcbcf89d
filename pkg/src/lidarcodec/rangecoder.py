"""Range coder over the 255-symbol occupancy alphabet.

Probabilities cross into integers exactly once, in :func:`quantize_pmf`;
everything after that is integer arithmetic, so encoder and decoder stay in
lockstep whenever they see bit-identical pmfs.

Coder registers are 64 bits wide (Python ints, masked).  ``range`` is kept in
[2^56, 2^64]; bytes leave from the top of ``low`` and a carry out of ``low``
is propagated into the bytes already written.  The flush emits at most one
byte, and a decoder reading past the end sees zero bytes.
"""
from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .errors import FormatError, TruncationError

PRECISION = 16
TOTAL = 1 << PRECISION
NUM_SYMBOLS = 255

_MASK64 = (1 << 64) - 1
_TOP = 1 << 64
_RENORM = 1 << 56
_MAX_OVERRUN = 8


class InvalidPMFError(FormatError, ValueError):
    pass


def quantize_pmf(p) -> np.ndarray:
    """Largest-remainder allocation of 2^16 counts with a floor of one each.

    Accepts one pmf (255,) or a batch (rows, 255); returns cumulative
    frequencies of shape (..., 256) with ``cdf[0] = 0`` and
    ``cdf[255] = 2^16``.  Remainder ties go to the lower symbol index.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != NUM_SYMBOLS:
        raise InvalidPMFError(f"expected {NUM_SYMBOLS} probabilities, got {p.shape[1]}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidPMFError("pmf entries must be finite and non-negative")
    spare = TOTAL - NUM_SYMBOLS
    scaled = p * spare
    base = np.floor(scaled)
    rem = scaled - base
    base = base.astype(np.int64)
    left = spare - base.sum(axis=1)
    if np.any(left < 0) or np.any(left > NUM_SYMBOLS):
        raise InvalidPMFError("pmf does not sum to 1")
    # the `left` largest remainders get one extra count; ties go to the lower
    # index (the same result as a stable descending sort)
    srt = np.sort(rem, axis=1)
    k = np.clip(NUM_SYMBOLS - left, 0, NUM_SYMBOLS - 1)
    cut = srt[np.arange(len(p)), k][:, None]
    above = rem > cut
    tie = rem == cut
    need = (left - above.sum(axis=1))[:, None]
    bump = (above | (tie & (np.cumsum(tie, axis=1) <= need))) & (left > 0)[:, None]
    freq = base + 1 + bump
    cdf = np.zeros((len(p), NUM_SYMBOLS + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf[0] if single else cdf


UNIFORM_CDF = quantize_pmf(np.full(NUM_SYMBOLS, 1.0 / NUM_SYMBOLS))


def symbol_bits(cdf, symbol: int) -> float:
    """Ideal code length of ``symbol`` (1..255) under a quantized table."""
    freq = int(cdf[symbol]) - int(cdf[symbol - 1])
    return PRECISION - float(np.log2(freq))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _TOP
        self.out = bytearray()
        self.count = 0

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, cdf, symbol: int):
        """Code ``symbol`` in 1..255 against cumulative table ``cdf``."""
        if not 1 <= symbol <= NUM_SYMBOLS:
            raise ValueError(f"symbol {symbol} outside [1, {NUM_SYMBOLS}]")
        lo = int(cdf[symbol - 1])
        hi = int(cdf[symbol])
        if hi <= lo:
            raise ValueError(f"symbol {symbol} not codable under this table")
        r = self.range >> PRECISION
        self.low += r * lo
        self.range = r * (hi - lo)
        if self.low >= _TOP:
            self.low &= _MASK64
            self._carry()
        while self.range < _RENORM:
            self.out.append(self.low >> 56)
            self.low = (self.low << 8) & _MASK64
            self.range <<= 8
        self.count += 1

    def finish(self) -> bytes:
        """Flush: emit the shortest byte prefix that pins a value in [low, low + range)."""
        for k in range(0, 9):
            unit = 1 << (64 - 8 * k)
            v = -(-self.low // unit) * unit
            if v < self.low + self.range:
                break
        if v >= _TOP:
            v -= _TOP
            self._carry()
        tail = v.to_bytes(8, "big")[:k]
        payload = bytes(self.out) + tail
        return payload

    @property
    def bytes_written(self) -> int:
        return len(self.out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.buf = bytes(payload)
        self.pos = 0
        self.overrun = 0
        self.shifts = 0
        self.range = _TOP
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.buf):
            b = self.buf[self.pos]
            self.pos += 1
            return b
        self.overrun += 1
        if self.overrun > _MAX_OVERRUN:
            raise TruncationError("coded payload exhausted")
        return 0

    def decode(self, cdf) -> int:
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise FormatError("corrupt payload: code value outside the table")
        j = bisect_right(cdf, v) - 1
        lo = int(cdf[j])
        self.code -= r * lo
        self.range = r * (int(cdf[j + 1]) - lo)
        while self.range < _RENORM:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
            self.shifts += 1
        return j + 1

    def finish(self):
        """Reject payloads longer than the stream could have produced.

        The encoder emits one byte per renormalization shift plus at most
        eight flush bytes; anything beyond that is surplus.
        """
        extra = len(self.buf) - (self.shifts + 8)
        if extra > 0:
            raise FormatError(f"{extra} trailing payload byte(s)")
