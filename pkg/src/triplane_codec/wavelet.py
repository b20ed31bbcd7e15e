"""Two-level orthonormal Haar transform and the step-weighted wavelet loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LEVELS = 2


@dataclass
class WaveletPyramid:
    yl: np.ndarray  # (H/4, W/4, ch)
    yh: list  # per level (finest first): (LH, HL, HH)


@dataclass(frozen=True)
class WaveletSchedule:
    l1_start: float = 1.0
    l1_end: float = 0.2
    l2_start: float = 0.0
    l2_end: float = 0.8
    total_steps: int = 30000

    def __post_init__(self):
        vals = (self.l1_start, self.l1_end, self.l2_start, self.l2_end)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValidationError("wavelet weights must be finite and nonnegative")
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValidationError(f"expected (H, W) or (H, W, ch) image, got {img.shape}")
    return img


def _analysis(x):
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2  # detail across columns
    hl = (a + b - c - d) / 2  # detail across rows
    hh = (a - b - c + d) / 2
    return ll, (lh, hl, hh)


def _synthesis(ll, bands):
    lh, hl, hh = bands
    h, w, ch = ll.shape
    x = np.empty((2 * h, 2 * w, ch))
    x[0::2, 0::2] = (ll + lh + hl + hh) / 2
    x[0::2, 1::2] = (ll - lh + hl - hh) / 2
    x[1::2, 0::2] = (ll + lh - hl - hh) / 2
    x[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return x


def dwt2(img, levels: int = LEVELS) -> WaveletPyramid:
    x = _as_image(img)
    m = 2**levels
    if x.shape[0] % m or x.shape[1] % m:
        raise ValidationError(f"image dims {x.shape[:2]} not divisible by {m}")
    yh = []
    for _ in range(levels):
        x, bands = _analysis(x)
        yh.append(bands)
    return WaveletPyramid(x, yh)


def idwt2(pyr: WaveletPyramid) -> np.ndarray:
    x = np.asarray(pyr.yl, dtype=np.float64)
    for bands in reversed(pyr.yh):
        if any(b.shape != x.shape for b in bands):
            raise ValidationError("subband shapes inconsistent with the low band")
        x = _synthesis(x, bands)
    return x


def lambda_schedule(step: int, sched: WaveletSchedule):
    if step < 0:
        raise ValidationError("step must be >= 0")
    t = min(step / sched.total_steps, 1.0)
    return (
        sched.l1_start + t * (sched.l1_end - sched.l1_start),
        sched.l2_start + t * (sched.l2_end - sched.l2_start),
    )


def wavelet_terms(img1, img2):
    """(low-band L1, summed high-band L1) between two images."""
    a, b = _as_image(img1), _as_image(img2)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    pa, pb = dwt2(a), dwt2(b)
    low = float(np.mean(np.abs(pa.yl - pb.yl)))
    high = 0.0
    for ba, bb in zip(pa.yh, pb.yh):
        high += float(np.mean([np.mean(np.abs(x - y)) for x, y in zip(ba, bb)]))
    return low, high


def wavelet_loss(img1, img2, step: int, sched: WaveletSchedule) -> float:
    l1, l2 = lambda_schedule(step, sched)
    low, high = wavelet_terms(img1, img2)
    return l1 * low + l2 * high


def crop_to_multiple(img, multiple: int = 2**LEVELS):
    """Crop trailing rows and columns so both dims divide `multiple`. Returns (image, cropped?)."""
    x = _as_image(img)
    h, w = x.shape[0] - x.shape[0] % multiple, x.shape[1] - x.shape[1] % multiple
    if h == 0 or w == 0:
        raise ValidationError(f"image {x.shape[:2]} smaller than {multiple}x{multiple}")
    return x[:h, :w], (h, w) != x.shape[:2]
