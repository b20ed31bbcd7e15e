"""Integer frequency tables from Gaussian bin probabilities, and symbol coding.

Each coefficient gets a window of symbols centred on round(mu / q) whose
half-width follows sigma / q, plus one escape bucket. Escaped symbols are
followed by their raw 32-bit value. Tables are a pure function of
(mu, sigma, q) evaluated element-wise in fp64, so encoder and decoder
rebuild identical tables from identical inputs.
"""

from __future__ import annotations

import hashlib
from array import array
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ..context import round_half_away
from ..errors import ValidationError
from .rangecoder import TOTAL, RangeDecoder, RangeEncoder

Z_FLOOR = 4.0  # minimum window half-width in units of sigma
W_MIN = 2
W_MAX = 1 << 11
S_MAX = 2**15 - 1
RAW_OFFSET = 1 << 31
CHUNK = 2048

# window half-widths are rounded up to 2**e * {1, 1.25, 1.5, 1.75} so rows batch by width
_BUCKETS = np.array(sorted({(8 + j) * 2**e // 8 for e in range(1, 12) for j in range(8)} | {W_MAX}))
_BUCKETS = _BUCKETS[(_BUCKETS >= W_MIN) & (_BUCKETS <= W_MAX)]


def discretize_probabilities(p) -> np.ndarray:
    """Largest-remainder rounding of probability rows to integer counts summing to 2**16.

    Every entry receives at least 1. Missing counts go to the largest
    remainders; surplus counts (caused by the floor of 1) come off the
    smallest remainders. Accepts a 1-D vector or a 2-D batch of rows.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] > TOTAL:
        raise ValidationError("alphabet larger than the frequency total")
    p = np.maximum(p, 0.0)
    scaled = p / p.sum(axis=1, keepdims=True)
    scaled *= TOTAL
    # counts stay in float64 (exact for integers this small) until the end
    fl = np.floor(scaled)
    rem = scaled - fl
    forced = fl < 1
    np.maximum(fl, 1.0, out=fl)
    deficit = TOTAL - fl.sum(axis=1).astype(np.int64)
    f = fl.astype(np.int64)
    if not np.any(deficit):
        return f[0] if single else f

    # Integer keys with the column index in the low bits are unique, so the
    # selection below does not depend on how ties would be sorted.
    width = p.shape[1]
    bits = max(int(width - 1).bit_length(), 1)
    col = np.arange(width, dtype=np.int64)
    sentinel = np.int64(np.iinfo(np.int64).max)

    def rem_key(rows):
        return (rem[rows] * (1 << 40)).astype(np.int64) << bits

    rows = np.flatnonzero(deficit > 0)
    if rows.size:
        # largest remainders first, lower index first among equals
        key = np.where(forced[rows], sentinel, (((1 << 40) - 1) << bits) - rem_key(rows) + col)
        kth = np.sort(key, axis=1)
        d = np.minimum(deficit[rows], width) - 1
        cut = kth[np.arange(rows.size), d]
        f[rows] += (key <= cut[:, None]) & (key != sentinel)

    deficit = TOTAL - f.sum(axis=1)
    while np.any(deficit < 0):
        # smallest remainders first among entries that can spare a count;
        # repeated passes cover surpluses larger than the number of donors
        rows = np.flatnonzero(deficit < 0)
        spare = (~forced[rows]) & (f[rows] > 1)
        if not np.any(spare):
            break
        key = np.where(spare, rem_key(rows) + col, sentinel)
        kth = np.sort(key, axis=1)
        d = np.minimum(-deficit[rows], width) - 1
        cut = kth[np.arange(rows.size), d]
        f[rows] -= (key <= cut[:, None]) & (key != sentinel)
        deficit = TOTAL - f.sum(axis=1)

    deficit = TOTAL - f.sum(axis=1)
    for r in np.flatnonzero(deficit != 0):
        # unforced entries ran out: adjust the largest counts directly
        step = 1 if deficit[r] > 0 else -1
        while deficit[r] != 0:
            f[r, int(np.argmax(f[r]))] += step
            deficit[r] -= step
    return f[0] if single else f


def _half_width(sigma, q):
    # extend the window to where a bin's ideal count drops below one
    ratio = q * TOTAL / (sigma * np.sqrt(2 * np.pi))
    z = np.maximum(np.sqrt(2 * np.log(np.maximum(ratio, 1.0))), Z_FLOOR)
    w = np.ceil(z * sigma / q) + 1
    w = np.clip(w, W_MIN, W_MAX)
    return _BUCKETS[np.searchsorted(_BUCKETS, w)]


def _window_freqs(mu, sigma, q, centre, w):
    """Frequencies for rows sharing half-width w: (n, 2w + 2), last column = escape."""
    j = np.arange(-w, w + 2, dtype=np.float64)  # bin edges at (s - 1/2) q for s = centre-w .. centre+w+1
    # standardized edge = first edge + j * (q / sigma): one multiply-add per entry
    first = ((centre - 0.5) * q - mu) / sigma
    edges = first[:, None] + j[None, :] * (q / sigma)[:, None]
    cdf = ndtr(edges)
    p = np.empty((mu.shape[0], 2 * w + 2))
    p[:, :-1] = np.diff(cdf, axis=1)
    p[:, -1] = cdf[:, 0] + ndtr(-edges[:, -1])
    return discretize_probabilities(p)


@dataclass
class IntegerBinModel:
    """Frequency table over symbols lo .. lo + len(freqs) - 2 plus an escape bucket."""

    lo: int
    freqs: np.ndarray

    @property
    def cum(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freqs)])

    @property
    def escape(self) -> int:
        return len(self.freqs) - 1

    def probability(self, s: int) -> float:
        i = s - self.lo
        if 0 <= i < self.escape:
            return self.freqs[i] / TOTAL
        return self.freqs[-1] / TOTAL


def discretize_bin_model(mu, sigma, q) -> IntegerBinModel:
    models = GaussianBinModels(np.atleast_1d(mu), np.atleast_1d(sigma), np.atleast_1d(q))
    lo, cum = next(models.chunks())[2:4]
    return IntegerBinModel(int(lo[0]), np.diff(cum[0]))


class GaussianBinModels:
    """Per-coefficient bin models for a whole symbol sequence, built lazily in chunks."""

    def __init__(self, mu, sigma, q):
        self.mu = np.asarray(mu, dtype=np.float64).ravel()
        self.sigma = np.asarray(sigma, dtype=np.float64).ravel()
        self.q = np.broadcast_to(np.asarray(q, dtype=np.float64), self.mu.shape).ravel()
        if not (self.mu.shape == self.sigma.shape):
            raise ValidationError("mu and sigma must have equal length")
        if np.any(self.sigma <= 0) or np.any(self.q <= 0):
            raise ValidationError("sigma and q must be positive")

    def __len__(self):
        return self.mu.shape[0]

    def _chunk(self, start, stop):
        """Row ids sharing one window width, with their lows and cumulative tables."""
        mu, sigma, q = self.mu[start:stop], self.sigma[start:stop], self.q[start:stop]
        # windows stay inside [-S_MAX, S_MAX]; anything beyond goes through the escape
        centre = np.clip(round_half_away(mu / q), -S_MAX + W_MAX, S_MAX - W_MAX)
        width = _half_width(sigma, q)
        lo = (centre - width).astype(np.int64)
        groups = []
        for w in np.unique(width):
            rows = np.flatnonzero(width == w)
            f = _window_freqs(mu[rows], sigma[rows], q[rows], centre[rows], int(w))
            c = np.zeros((rows.size, f.shape[1] + 1), dtype=np.int64)
            np.cumsum(f, axis=1, out=c[:, 1:])
            groups.append((rows, c))
        return lo, groups

    def groups(self):
        """Yield (start, rows, lo, cum) for rows of one chunk sharing a window width.

        cum is an (n_rows, alphabet + 2) array of cumulative counts whose
        last interval is the escape bucket.
        """
        for start in range(0, len(self), CHUNK):
            lo, groups = self._chunk(start, min(start + CHUNK, len(self)))
            for rows, c in groups:
                yield start, rows, lo[rows], c

    def chunks(self):
        """Yield (start, stop, lo, cum) with cum a list of per-row Python lists."""
        for start in range(0, len(self), CHUNK):
            stop = min(start + CHUNK, len(self))
            lo, groups = self._chunk(start, stop)
            cum = [None] * (stop - start)
            for rows, c in groups:
                for r, row in zip(rows.tolist(), c.tolist()):
                    cum[r] = row
            yield start, stop, lo, cum

    def symbol_intervals(self, symbols):
        """(cum, freq, escaped) per symbol, computed without per-row Python lists."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        cum = np.empty(len(self), dtype=np.int64)
        freq = np.empty(len(self), dtype=np.int64)
        esc = np.empty(len(self), dtype=bool)
        for start, rows, lo, c in self.groups():
            ids = start + rows
            i = symbols[ids] - lo
            last = c.shape[1] - 2
            out = (i < 0) | (i >= last)
            i = np.where(out, last, i)
            lo_c = np.take_along_axis(c, i[:, None], axis=1)[:, 0]
            hi_c = np.take_along_axis(c, i[:, None] + 1, axis=1)[:, 0]
            cum[ids], freq[ids], esc[ids] = lo_c, hi_c - lo_c, out
        return cum, freq, esc

    def table_digest(self) -> str:
        """SHA-256 over every table, for cross-checking encoder and decoder."""
        h = hashlib.sha256()
        for _, _, lo, cum in self.chunks():
            h.update(np.asarray(lo, dtype="<i8").tobytes())
            for row in cum:
                h.update(np.asarray(row, dtype="<i8").tobytes())
        return h.hexdigest()


def _as_models(models):
    if isinstance(models, GaussianBinModels):
        return models
    return _ExplicitModels(list(models))


class _ExplicitModels:
    """Adapter for a plain list of IntegerBinModel objects."""

    def __init__(self, models):
        self.models = models

    def __len__(self):
        return len(self.models)

    def chunks(self):
        lo = np.array([m.lo for m in self.models], dtype=np.int64)
        cum = [m.cum.tolist() for m in self.models]
        yield 0, len(self.models), lo, cum


def encode_symbols(symbols, models) -> bytes:
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    models = _as_models(models)
    if symbols.shape[0] != len(models):
        raise ValidationError(f"{symbols.shape[0]} symbols but {len(models)} models")
    enc = RangeEncoder()
    if isinstance(models, GaussianBinModels):
        cum, freq, esc = models.symbol_intervals(symbols)
    else:
        cum, freq, esc = _explicit_intervals(symbols, models)
    encode = enc.encode
    for c, f, e, s in zip(cum.tolist(), freq.tolist(), esc.tolist(), symbols.tolist()):
        encode(c, f)
        if e:
            enc.encode_raw32(s + RAW_OFFSET)
    return enc.finish()


def _explicit_intervals(symbols, models):
    cum, freq, esc = [], [], []
    for s, m in zip(symbols.tolist(), models.models):
        c = m.cum
        i = s - m.lo
        e = not 0 <= i < m.escape
        i = m.escape if e else i
        cum.append(int(c[i]))
        freq.append(int(c[i + 1] - c[i]))
        esc.append(e)
    return np.array(cum, dtype=np.int64), np.array(freq, dtype=np.int64), np.array(esc, dtype=bool)


def decode_symbols(stream: bytes, models, count: int | None = None) -> np.ndarray:
    models = _as_models(models)
    count = len(models) if count is None else count
    if count != len(models):
        raise ValidationError(f"count {count} != number of models {len(models)}")
    dec = RangeDecoder(stream)
    out = np.empty(count, dtype=np.int64)
    for start, stop, lo, flat, first, last in _flat_chunks(models):
        # one flat int64 buffer per chunk; row j occupies flat[first[j]:last[j] + 2]
        idx = dec.decode_rows(flat, first, last)
        out[start:stop] = [l + i if type(i) is int else i[0] - RAW_OFFSET for l, i in zip(lo, idx)]
    return out


def _flat_chunks(models):
    if not isinstance(models, GaussianBinModels):
        for start, stop, lo, cum in models.chunks():
            flat, first = [], []
            for row in cum:
                first.append(len(flat))
                flat.extend(row)
            yield start, stop, lo.tolist(), array("q", flat), first, [a + len(r) - 2 for a, r in zip(first, cum)]
        return
    for start in range(0, len(models), CHUNK):
        stop = min(start + CHUNK, len(models))
        lo, groups = models._chunk(start, stop)
        first = np.empty(stop - start, dtype=np.int64)
        size = np.empty(stop - start, dtype=np.int64)
        parts, offset = [], 0
        for rows, c in groups:
            first[rows] = offset + np.arange(rows.size) * c.shape[1]
            size[rows] = c.shape[1]
            offset += c.size
            parts.append(c.ravel())
        flat = array("q", np.concatenate(parts).astype("<i8").tobytes())
        yield start, stop, lo.tolist(), flat, first.tolist(), (first + size - 2).tolist()


def table_codelength(symbols, models) -> float:
    """Bits the coder spends under the discretized tables, excluding flush."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    models = _as_models(models)
    bits = 0.0
    for start, stop, lo, cum in models.chunks():
        for j in range(stop - start):
            row = cum[j]
            i = int(symbols[start + j] - lo[j])
            esc = len(row) - 2
            if not 0 <= i < esc:
                i = esc
                bits += 32
            bits -= np.log2((row[i + 1] - row[i]) / TOTAL)
    return bits
