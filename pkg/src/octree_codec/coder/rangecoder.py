"""Byte-oriented range coder with a 32-bit range and 16-bit frequencies.

The encoder keeps a 33-bit ``low`` and resolves carries through a one-byte
cache plus a run of pending 0xFF bytes.  The always-zero leading byte is not
written, the final flush emits only what the decoder needs, and trailing zero
bytes are dropped (the decoder reads zeros past the end).  At least one byte
is always written, so an empty payload is never valid.
"""
from __future__ import annotations

from bisect import bisect_right

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
FREQ_BITS = 16
FREQ_TOTAL = 1 << FREQ_BITS


class RangeCoderError(ValueError):
    pass


class RangeDecodeError(RangeCoderError):
    def __init__(self, message: str, position: int | None = None):
        where = "" if position is None else f" (symbol {position})"
        super().__init__(message + where)
        self.position = position


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._skip_first = True
        self.count = 0

    def _emit(self, byte: int) -> None:
        if self._skip_first:
            # the first byte is the integer part of the code value, always 0
            self._skip_first = False
            if byte:
                raise RangeCoderError("range coder overflow")
            return
        self.out.append(byte)

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self._emit((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int) -> None:
        """Code the interval ``[cum, cum + freq)`` of a 2^16 total."""
        if freq <= 0:
            raise RangeCoderError(f"zero-frequency symbol at position {self.count}")
        if cum < 0 or cum + freq > FREQ_TOTAL:
            raise RangeCoderError(f"interval [{cum}, {cum + freq}) outside [0, {FREQ_TOTAL})")
        r = self.range >> FREQ_BITS
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def encode_symbol(self, cdf, symbol: int) -> None:
        lo = int(cdf[symbol])
        self.encode(lo, int(cdf[symbol + 1]) - lo)

    def finish(self) -> bytes:
        # smallest value in [low, low + range) with zero low 24 bits
        self.low = (self.low + TOP - 1) & ~(TOP - 1)
        for _ in range(5):
            self._shift_low()
        out = bytes(self.out).rstrip(b"\x00")
        return out if out else b"\x00"


class RangeDecoder:
    def __init__(self, data: bytes):
        if not data:
            raise RangeDecodeError("empty payload")
        self.data = bytes(data)
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self.count = 0

    def _next(self) -> int:
        p = self.pos
        self.pos += 1
        return self.data[p] if p < len(self.data) else 0

    @property
    def overrun(self) -> int:
        """Bytes read past the end of the payload."""
        return max(0, self.pos - len(self.data))

    def decode_target(self) -> int:
        self._r = self.range >> FREQ_BITS
        v = self.code // self._r
        if v >= FREQ_TOTAL:
            raise RangeDecodeError("code value outside the coding interval", self.count)
        return v

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        self.count += 1

    def decode_symbol(self, cdf) -> int:
        """Decode one symbol given a 256-entry cumulative list/array."""
        v = self.decode_target()
        s = bisect_right(cdf, v) - 1
        lo = int(cdf[s])
        self.consume(lo, int(cdf[s + 1]) - lo)
        return s
