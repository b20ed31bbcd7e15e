import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplane_codec.codec.binmodel import (
    S_MAX,
    GaussianBinModels,
    IntegerBinModel,
    decode_symbols,
    discretize_bin_model,
    discretize_probabilities,
    encode_symbols,
    table_codelength,
)
from triplane_codec.codec.rangecoder import TOTAL, RangeDecoder, RangeEncoder
from triplane_codec.errors import CodecError, TruncatedError


def largest_remainder_oracle(p, total=TOTAL):
    """Plain-Python largest remainder with a floor of one count per entry.

    Entries raised to the floor take no further share. A surplus is paid
    back by the free entries with the smallest remainders.
    """
    s = math.fsum(p)
    exact = [x / s * total for x in p]
    forced = [x < 1 for x in exact]
    f = [1 if fz else math.floor(x) for x, fz in zip(exact, forced)]
    rem = [x - math.floor(x) for x in exact]
    free = [i for i in range(len(p)) if not forced[i]]
    d = total - sum(f)
    if d > 0:
        for i in sorted(free, key=lambda i: (-rem[i], i))[:d]:
            f[i] += 1
    while d < 0:
        for i in sorted(free, key=lambda i: (rem[i], i)):
            if d == 0:
                break
            if f[i] > 1:
                f[i] -= 1
                d += 1
    return f


def test_uniform_four_symbols():
    assert list(discretize_probabilities(np.full(4, 0.25))) == [16384] * 4


def test_standard_normal_zero_bin():
    m = discretize_bin_model(0.0, 1.0, 1.0)
    mpmath.mp.dps = 30
    edges = [mpmath.ncdf(s - 0.5) for s in range(m.lo, m.lo + m.escape + 1)]
    p = [float(b - a) for a, b in zip(edges, edges[1:])]
    p.append(float(edges[0] + 1 - edges[-1]))
    want = largest_remainder_oracle(p)
    assert list(m.freqs) == want
    ideal = float(mpmath.ncdf(0.5) - mpmath.ncdf(-0.5)) * TOTAL  # 25095.37
    assert abs(m.freqs[-m.lo] - ideal) <= 1


@given(st.lists(st.floats(0, 1), min_size=1, max_size=300).filter(lambda v: sum(v) > 0))
def test_discretization_total_and_floor(p):
    f = discretize_probabilities(np.array(p))
    assert f.sum() == TOTAL and f.min() >= 1


@given(st.integers(0, 2**31))
def test_discretization_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(rng.integers(2, 50), 0.3))
    assert list(discretize_probabilities(p)) == largest_remainder_oracle(list(p))


@given(st.floats(-50, 50), st.floats(1e-6, 100), st.floats(1e-3, 1))
def test_bin_model_invariants(mu, sigma, q):
    m = discretize_bin_model(mu, sigma, q)
    assert m.freqs.sum() == TOTAL and m.freqs.min() >= 1
    assert np.all(np.diff(m.cum) > 0)
    assert m.lo + m.escape - 1 <= S_MAX + 2 * 2**11


def test_empty_stream():
    data = encode_symbols([], GaussianBinModels([], [], 1.0))
    assert len(data) <= 16
    assert decode_symbols(data, GaussianBinModels([], [], 1.0)).size == 0


def test_half_probability_payload():
    half = IntegerBinModel(0, np.array([TOTAL // 2, TOTAL // 2 - 1, 1]))
    rng = np.random.default_rng(0)
    s = rng.integers(0, 2, 10_000)
    data = encode_symbols(s, [half] * s.size)
    assert 1250 <= len(data) <= 1250 + 64
    assert np.array_equal(decode_symbols(data, [half] * s.size), s)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("n", [0, 1, 100_000])
def test_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    mu = rng.normal(scale=3, size=n)
    q = rng.choice([0.01, 0.05, 1.0], size=n)
    sigma = q * rng.uniform(0.2, 30, size=n)
    s = np.round((mu + sigma * rng.standard_t(3, size=n)) / q).astype(np.int64)
    models = GaussianBinModels(mu, sigma, q)
    data = encode_symbols(s, models)
    assert np.array_equal(decode_symbols(data, models), s)
    if n:
        ideal = table_codelength(s, models) / 8
        assert len(data) <= ideal + 64


def test_escape_round_trip():
    models = GaussianBinModels([0.0, 0.0, 0.0, 5.0], [1.0, 1.0, 1.0, 0.1], 1.0)
    s = np.array([2**31 - 1, -(2**31), 40_000, 5])
    data = encode_symbols(s, models)
    assert np.array_equal(decode_symbols(data, models), s)
    single = GaussianBinModels([0.0], [1e-6], 1.0)
    assert decode_symbols(encode_symbols([-77], single), single)[0] == -77


def test_raw_interval_coding():
    enc = RangeEncoder()
    for v in (0, 1, 2**32 - 1, 123456789):
        enc.encode_raw32(v)
    dec = RangeDecoder(enc.finish())
    assert [dec.decode_raw32() for _ in range(4)] == [0, 1, 2**32 - 1, 123456789]


def fuzz_fixture():
    rng = np.random.default_rng(5)
    n = 400
    models = GaussianBinModels(rng.normal(size=n), rng.uniform(0.1, 2, n), 0.1)
    s = np.round(rng.normal(size=n) / 0.1).astype(np.int64)
    return s, models, encode_symbols(s, models)


@settings(max_examples=200)
@given(st.data())
def test_byte_flip_never_crashes(data):
    s, models, blob = FUZZ
    pos = data.draw(st.integers(0, len(blob) - 1))
    bit = data.draw(st.integers(0, 7))
    bad = bytearray(blob)
    bad[pos] ^= 1 << bit
    try:
        out = decode_symbols(bytes(bad), models)
    except CodecError:
        return
    assert out.shape == s.shape


FUZZ = fuzz_fixture()


@pytest.mark.parametrize("cut", [0, 5, 20, -9, -1])
def test_truncated_stream(cut):
    s, models, blob = FUZZ
    with pytest.raises(TruncatedError):
        decode_symbols(blob[:cut], models)
