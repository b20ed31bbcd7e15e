"""Learnable binary masks over anchors and offset slots (straight-through)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorCloud
from .errors import ValidationError
from .gaussian import sigmoid

DEFAULT_THRESHOLD = 0.5
DEFAULT_INIT_LOGIT = 2.0


@dataclass
class MaskParams:
    anchor_logits: np.ndarray  # (N,)
    offset_logits: np.ndarray  # (N, k)
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        self.anchor_logits = np.asarray(self.anchor_logits, dtype=np.float64)
        self.offset_logits = np.asarray(self.offset_logits, dtype=np.float64)
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("mask threshold must lie in (0, 1)")
        if self.offset_logits.ndim != 2 or self.offset_logits.shape[0] != self.anchor_logits.shape[0]:
            raise ValidationError("offset logits must be (N, k) matching anchor logits (N,)")
        if not (np.all(np.isfinite(self.anchor_logits)) and np.all(np.isfinite(self.offset_logits))):
            raise ValidationError("mask logits must be finite")

    @classmethod
    def full(cls, n: int, k: int, logit: float = DEFAULT_INIT_LOGIT, threshold: float = DEFAULT_THRESHOLD):
        return cls(np.full(n, logit), np.full((n, k), logit), threshold)

    def hard(self):
        """(anchor mask (N,), offset mask (N, k)) as booleans."""
        return mask_forward(self.anchor_logits, self.threshold), mask_forward(self.offset_logits, self.threshold)

    def subset(self, idx) -> "MaskParams":
        return MaskParams(self.anchor_logits[idx], self.offset_logits[idx], self.threshold)

    def copy(self) -> "MaskParams":
        return MaskParams(self.anchor_logits.copy(), self.offset_logits.copy(), self.threshold)


def mask_forward(logit, threshold: float = DEFAULT_THRESHOLD):
    """Hard 0/1 mask: sigmoid(logit) > threshold."""
    return sigmoid(logit) > threshold


def mask_backward(logit, upstream):
    """Straight-through gradient: upstream * sigmoid'(logit)."""
    s = sigmoid(logit)
    return upstream * s * (1.0 - s)


def mask_loss(masks: MaskParams) -> float:
    total = masks.anchor_logits.size + masks.offset_logits.size
    return float((sigmoid(masks.anchor_logits).sum() + sigmoid(masks.offset_logits).sum()) / total)


def mask_loss_grad(masks: MaskParams):
    total = masks.anchor_logits.size + masks.offset_logits.size
    return mask_backward(masks.anchor_logits, 1.0 / total), mask_backward(masks.offset_logits, 1.0 / total)


@dataclass
class PrunedCloud:
    cloud: AnchorCloud  # survivors, masked offsets zeroed
    index_map: np.ndarray  # survivor -> original anchor id
    offset_keep: np.ndarray  # (N', k) bool, False = slot skipped when coding


def apply_masks(cloud: AnchorCloud, masks: MaskParams) -> PrunedCloud:
    if masks.anchor_logits.shape != (cloud.n,) or masks.offset_logits.shape != (cloud.n, cloud.k):
        raise ValidationError("mask shapes do not match the cloud")
    keep_anchor, keep_offset = masks.hard()
    survivors = np.flatnonzero(keep_anchor)
    if survivors.size == 0:
        raise ValidationError("every anchor is masked out")
    keep_offset = keep_offset[survivors]
    sub = cloud.subset(survivors)
    offsets = np.where(keep_offset[..., None], sub.offsets, 0.0)
    pruned = AnchorCloud(sub.positions, sub.features, sub.scalings, offsets)
    return PrunedCloud(pruned, survivors, keep_offset)
