import dataclasses

import numpy as np
import pytest

from triplane_codec.anchors import synth_correlated_cloud
from triplane_codec.codec.container import (
    POS_LEVELS,
    compress_scene,
    decompress_scene,
    expected_reconstruction,
    read_header,
    read_stats,
)
from triplane_codec.errors import CorruptionError, ValidationError
from triplane_codec.trainer import TrainConfig, fit, init_state


@pytest.fixture(scope="module")
def packed(tiny_trained):
    cloud, cfg, state = tiny_trained
    blob, stats = compress_scene(cloud, state, with_digests=True)
    return cloud, cfg, state, blob, stats


def test_round_trip_is_lossless(packed):
    cloud, cfg, state, blob, stats = packed
    dec = decompress_scene(blob)
    keep = dec.anchor_keep
    src = cloud.subset(np.flatnonzero(keep))
    want = expected_reconstruction(src, cfg.qcfg)
    assert np.array_equal(dec.cloud.features, want["features"])
    assert np.array_equal(dec.cloud.scalings, want["scalings"])
    off = np.where(dec.offset_keep[..., None], want["offsets"], 0.0)
    assert np.array_equal(dec.cloud.offsets, off)
    ext = src.positions.max(axis=0) - src.positions.min(axis=0)
    assert np.all(np.abs(dec.cloud.positions - src.positions) <= ext / POS_LEVELS / 2 * (1 + 1e-9) + 1e-12)


def test_decode_is_deterministic_and_tables_agree(packed):
    *_, blob, stats = packed
    a = decompress_scene(blob, with_digests=True)
    b = decompress_scene(blob)
    for name in ("positions", "features", "scalings", "offsets"):
        assert np.array_equal(getattr(a.cloud, name), getattr(b.cloud, name))
    assert a.stats.table_digests == stats.table_digests


def test_accounting(packed):
    cloud, _, _, blob, stats = packed
    assert stats.total_bytes == len(blob)
    assert stats.bits_per_anchor == pytest.approx(len(blob) * 8 / cloud.n)
    assert read_stats(blob).total_bytes == len(blob)
    hdr, infos = read_header(blob)
    assert hdr["n_orig"] == cloud.n
    assert [i.length for i in infos] == [s.length for s in stats.sections]
    assert all(i.offset % 8 == 0 for i in infos)


def test_payload_within_estimate(packed):
    *_, stats = packed
    for s in stats.sections:
        if s.name in ("features", "scalings", "offsets"):
            assert s.length <= s.est_bits / 8 * 1.02 + 64, s.name


@pytest.mark.parametrize("where", ["magic", "version", "header", "section"])
def test_corruption_detected(packed, where):
    *_, blob, stats = packed
    bad = bytearray(blob)
    if where == "magic":
        bad[0] ^= 0xFF
    elif where == "version":
        bad[4] ^= 1
    elif where == "header":
        bad[20] ^= 1
    else:
        bad[stats.section("features").offset + 3] ^= 0x10
    with pytest.raises(CorruptionError):
        decompress_scene(bytes(bad))


def test_truncated_file_is_corrupt(packed):
    *_, blob, _ = packed
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptionError):
            decompress_scene(blob[:cut])


def test_untrained_state_rejected(tiny_trained):
    cloud, cfg, _ = tiny_trained
    with pytest.raises(ValidationError):
        compress_scene(cloud, init_state(cloud, cfg))


def test_mask_mismatch_rejected(tiny_trained):
    cloud, _, state = tiny_trained
    with pytest.raises(ValidationError):
        compress_scene(cloud.subset(np.arange(10)), state)


def test_smaller_than_raw_for_large_cloud():
    cloud = synth_correlated_cloud(0, 10_000)
    state = fit(cloud, TrainConfig(total_steps=40, resolution=32, channels=8, hidden=32, seed=0))
    blob, stats = compress_scene(cloud, state)
    assert len(blob) < cloud.raw_nbytes()
    dec = decompress_scene(blob)
    assert dec.cloud.n == stats.n_anchors
