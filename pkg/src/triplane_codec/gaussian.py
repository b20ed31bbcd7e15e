"""Gaussian bin probabilities shared by the entropy loss and the coder."""

import math

import numpy as np
from scipy.special import ndtr

P_MIN = 1e-10
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


def normal_cdf(x):
    """Standard normal CDF.

    Backed by the Cephes ndtr routine, which switches between erf and erfc
    so both tails keep full relative precision.
    """
    return ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _bin_mass(hi, lo):
    # Subtract upper-tail masses when the bin sits right of zero; avoids
    # cancellation between two CDF values close to 1.
    right = (hi + lo) > 0
    return np.where(right, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def coeff_probability(s, mu, sigma, q, clamp=True):
    """Mass of N(mu, sigma^2) over the bin [s*q - q/2, s*q + q/2]."""
    center = np.asarray(s, dtype=np.float64) * q
    return bin_probability(center, mu, sigma, q, clamp=clamp)


def bin_probability(center, mu, sigma, q, clamp=True):
    half = np.asarray(q, dtype=np.float64) * 0.5
    hi = (center + half - mu) / sigma
    lo = (center - half - mu) / sigma
    p = _bin_mass(hi, lo)
    return np.maximum(p, P_MIN) if clamp else p


def bin_bits(center, mu, sigma, q, grad=False):
    """-log2 of the bin mass around `center`, with optional derivatives.

    Returns bits, or (bits, d bits / d mu, d bits / d sigma). Clamped bins
    (mass below P_MIN) have zero derivative.
    """
    half = np.asarray(q, dtype=np.float64) * 0.5
    hi = (center + half - mu) / sigma
    lo = (center - half - mu) / sigma
    raw = _bin_mass(hi, lo)
    p = np.maximum(raw, P_MIN)
    bits = -np.log2(p)
    if not grad:
        return bits
    live = raw >= P_MIN
    dbits_dp = np.where(live, -1.0 / (p * _LN2), 0.0)
    phi_hi = normal_pdf(hi)
    phi_lo = normal_pdf(lo)
    dp_dmu = (phi_lo - phi_hi) / sigma
    dp_dsigma = (phi_lo * lo - phi_hi * hi) / sigma
    return bits, dbits_dp * dp_dmu, dbits_dp * dp_dsigma


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
