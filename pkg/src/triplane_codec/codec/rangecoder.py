"""Carry-less range coder with a 64-bit state.

The interval is renormalized a byte at a time; whenever the range drops
below 2**32 without the top byte settling, it is truncated to the next
2**32 boundary instead of propagating a carry (Subbotin's scheme widened
to 64 bits). Every symbol is coded against a frequency table whose total
is exactly 2**16.
"""

import bisect

from ..errors import CorruptionError, TruncatedError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 56
_BOT = 1 << 32
_MASK = (1 << 64) - 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int):
        r = self.range >> PRECISION
        low = self.low + r * cum
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            out.append(low >> 56)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low = low
        self.range = rng

    def encode_raw32(self, value: int):
        self.encode((value >> 16) & 0xFFFF, 1)
        self.encode(value & 0xFFFF, 1)

    def finish(self) -> bytes:
        self.out += self.low.to_bytes(8, "big")
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 8:
            raise TruncatedError("range-coded stream shorter than its 8-byte flush")
        self.data = data
        self.pos = 8
        self.code = int.from_bytes(data[:8], "big")
        self.low = 0
        self.range = _MASK
        self._r = 0

    def target(self) -> int:
        """Cumulative frequency the next symbol falls into."""
        self._r = r = self.range >> PRECISION
        if r == 0:
            raise CorruptionError("range collapsed")
        v = (self.code - self.low) // r
        if v < 0 or v >= TOTAL:
            raise CorruptionError("decoded value outside the frequency table")
        return v

    def consume(self, cum: int, freq: int):
        r = self._r
        low = self.low + r * cum
        rng = r * freq
        code = self.code
        data = self.data
        pos = self.pos
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            if pos >= len(data):
                raise TruncatedError("range-coded stream ended early")
            code = ((code << 8) | data[pos]) & _MASK
            pos += 1
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code, self.pos = low, rng, code, pos

    def decode_raw32(self) -> int:
        hi = self.target()
        self.consume(hi, 1)
        lo = self.target()
        self.consume(lo, 1)
        return (hi << 16) | lo

    def decode_rows(self, flat, first, last) -> list:
        """Decode one symbol per row of a flat cumulative table.

        Row j spans flat[first[j]:last[j] + 2]; its last interval is the
        escape bucket. Returns in-row indices, with escaped symbols given
        as (raw value,) tuples. Same arithmetic as target/consume, kept in
        locals because this loop dominates decoding time.
        """
        low, rng, code, pos = self.low, self.range, self.code, self.pos
        data = self.data
        n = len(data)
        bisect_right = bisect.bisect_right
        out = []
        for a, esc in zip(first, last):
            r = rng >> PRECISION
            if r == 0:
                raise CorruptionError("range collapsed")
            v = (code - low) // r
            if v < 0 or v >= TOTAL:
                raise CorruptionError("decoded value outside the frequency table")
            i = bisect_right(flat, v, a, esc + 1) - 1
            c = flat[i]
            low += r * c
            rng = r * (flat[i + 1] - c)
            while True:
                if (low ^ (low + rng)) >= _TOP:
                    if rng >= _BOT:
                        break
                    rng = (-low) & (_BOT - 1)
                if pos >= n:
                    raise TruncatedError("range-coded stream ended early")
                code = ((code << 8) | data[pos]) & _MASK
                pos += 1
                low = (low << 8) & _MASK
                rng = (rng << 8) & _MASK
            if i == esc:
                self.low, self.range, self.code, self.pos = low, rng, code, pos
                out.append((self.decode_raw32(),))
                low, rng, code, pos = self.low, self.range, self.code, self.pos
            else:
                out.append(i - a)
        self.low, self.range, self.code, self.pos = low, rng, code, pos
        return out
