import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triplane_codec.anchors import synth_correlated_cloud
from triplane_codec.codec.container import compress_scene
from triplane_codec.errors import ValidationError
from triplane_codec.gaussian import sigmoid
from triplane_codec.masking import (
    MaskParams,
    apply_masks,
    mask_backward,
    mask_forward,
    mask_loss,
    mask_loss_grad,
)
from triplane_codec.trainer import TrainConfig, fit, with_overrides


def test_forward_examples():
    assert mask_forward(4.0) and not mask_forward(-4.0)
    out = mask_forward(np.linspace(-5, 5, 11), 0.3)
    assert out.dtype == bool


@given(st.floats(-20, 20), st.floats(-5, 5))
def test_straight_through_gradient(logit, x):
    s = sigmoid(logit)
    assert mask_backward(logit, x) == pytest.approx(x * s * (1 - s), abs=1e-15)


def test_apply_masks_identity():
    cloud = synth_correlated_cloud(0, 5)
    pruned = apply_masks(cloud, MaskParams.full(5, cloud.k))
    assert list(pruned.index_map) == list(range(5))
    assert np.array_equal(pruned.cloud.offsets, cloud.offsets)
    assert pruned.offset_keep.all()


def test_apply_masks_removes_anchor_and_zeroes_offsets():
    cloud = synth_correlated_cloud(0, 3)
    m = MaskParams.full(3, cloud.k)
    m.anchor_logits[1] = -4
    m.offset_logits[2, 0] = -4
    pruned = apply_masks(cloud, m)
    assert pruned.cloud.n == 2 and list(pruned.index_map) == [0, 2]
    assert not pruned.offset_keep[1, 0] and pruned.offset_keep.sum() == 2 * cloud.k - 1
    assert not np.any(pruned.cloud.offsets[1, 0])
    assert np.array_equal(pruned.cloud.offsets[0], cloud.offsets[0])


def test_validation():
    cloud = synth_correlated_cloud(0, 3)
    with pytest.raises(ValidationError):
        apply_masks(cloud, MaskParams.full(3, cloud.k, logit=-4))
    with pytest.raises(ValidationError):
        apply_masks(cloud, MaskParams.full(2, cloud.k))
    with pytest.raises(ValidationError):
        MaskParams.full(3, 4, threshold=1.0)
    with pytest.raises(ValidationError):
        MaskParams(np.array([np.nan]), np.zeros((1, 4)))


def test_mask_loss_examples():
    assert mask_loss(MaskParams.full(4, 2, logit=0.0)) == 0.5
    assert mask_loss(MaskParams.full(4, 2, logit=-700.0)) < 1e-300


def test_mask_loss_gradient(rng):
    m = MaskParams(rng.normal(size=6), rng.normal(size=(6, 3)))
    ga, go = mask_loss_grad(m)
    worst = 0.0
    for arr, g in ((m.anchor_logits, ga), (m.offset_logits, go)):
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = mask_loss(m)
            flat[i] = old - 1e-6
            fm = mask_loss(m)
            flat[i] = old
            fd = (fp - fm) / 2e-6
            worst = max(worst, abs(fd - gf[i]) / abs(fd))
    assert worst < 1e-6


def test_masking_half_the_offsets_shrinks_file(tiny_trained):
    cloud, _, state = tiny_trained
    full = state.copy()
    full.masks = MaskParams.full(cloud.n, cloud.k, logit=4.0)
    half = state.copy()
    half.masks = MaskParams.full(cloud.n, cloud.k, logit=4.0)
    half.masks.offset_logits[np.random.default_rng(0).random((cloud.n, cloud.k)) < 0.5] = -4.0
    assert len(compress_scene(cloud, half)[0]) < len(compress_scene(cloud, full)[0])


def test_prepruned_cloud_gives_same_attribute_bytes(tiny_trained):
    cloud, _, state = tiny_trained
    st_ = state.copy()
    st_.masks = MaskParams.full(cloud.n, cloud.k, logit=4.0)
    st_.masks.anchor_logits[::5] = -4.0
    st_.masks.offset_logits[1::3, 1] = -4.0
    blob_a, stats_a = compress_scene(cloud, st_)
    pruned = apply_masks(cloud, st_.masks)
    sub = st_.copy()
    sub.masks = st_.masks.subset(pruned.index_map)
    blob_b, stats_b = compress_scene(pruned.cloud, sub)
    for g in ("features", "scalings", "offsets"):
        a, b = stats_a.section(g), stats_b.section(g)
        assert blob_a[a.offset:a.offset + a.length] == blob_b[b.offset:b.offset + b.length]


def test_training_drives_masks_down():
    cloud = synth_correlated_cloud(1, 200)
    # attributes carry no fidelity weight, so only the rate and mask terms act on the masks
    cfg = TrainConfig(total_steps=200, resolution=16, channels=4, hidden=16, seed=1,
                      fidelity_features=0.0, fidelity_scalings=0.0, fidelity_offsets=0.0)
    state = fit(cloud, cfg)
    before = mask_loss(MaskParams.full(cloud.n, cloud.k, logit=cfg.mask_init_logit))
    assert mask_loss(state.masks) < before
