import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabinfer.channel import (
    ErasureChannelCfg, keep_mask, link_rng, n_blocks, round_rng, segment, transmit,
)
from collabinfer.errors import ConfigError


def test_segment_single_block():
    assert len(segment(np.arange(40.0), 40)) == 1


def test_segment_key_sized_payload():
    blocks = segment(np.arange(1024.0), 40)
    assert len(blocks) == 26
    assert len(blocks[-1]) == 24
    np.testing.assert_array_equal(np.concatenate(blocks), np.arange(1024.0))


def test_segment_empty():
    assert segment(np.array([]), 40) == []
    assert n_blocks(0, 40) == 0


def test_segment_rejects_bad_tbs():
    with pytest.raises(ConfigError):
        segment(np.ones(3), 0)


@pytest.mark.parametrize("kw", [{"tbs": 0}, {"per": -0.1}, {"per": 1.5}, {"tbs": 2.5}])
def test_cfg_validation(kw):
    with pytest.raises(ConfigError):
        ErasureChannelCfg(**kw)


def test_noiseless_identity():
    x = np.random.default_rng(0).normal(size=333)
    rx, rec = transmit(x, ErasureChannelCfg(tbs=40, per=0.0), np.random.default_rng(1))
    assert rx.tobytes() == x.tobytes()
    assert rec.erased == 0 and rec.sent == 9 and rec.length == 333


def test_total_erasure():
    x = np.random.default_rng(0).normal(size=100)
    rx, rec = transmit(x, ErasureChannelCfg(tbs=40, per=1.0, fill=0.0), np.random.default_rng(1))
    np.testing.assert_array_equal(rx, np.zeros(100))
    assert rec.erased == rec.sent == 3


def test_custom_fill():
    rx, _ = transmit(np.ones(10), ErasureChannelCfg(tbs=4, per=1.0, fill=-7.5),
                     np.random.default_rng(0))
    np.testing.assert_array_equal(rx, np.full(10, -7.5))


def test_erasure_rate_binomial_band():
    # 1e5 one-value blocks at PER 0.1: 3-sigma band [0.0972, 0.1028]
    cfg = ErasureChannelCfg(tbs=1, per=0.1)
    _, rec = transmit(np.ones(100_000), cfg, np.random.default_rng(2024))
    frac = rec.erased / rec.sent
    assert rec.sent == 100_000
    assert 0.0972 <= frac <= 0.1028


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 500), st.integers(1, 64), st.floats(0, 1), st.integers(0, 2**32))
def test_block_aligned_and_length_preserving(length, tbs, per, seed):
    x = np.arange(1.0, length + 1.0)  # never equal to the fill value
    cfg = ErasureChannelCfg(tbs=tbs, per=per, fill=0.0)
    rx, rec = transmit(x, cfg, np.random.default_rng(seed))
    assert rx.shape == x.shape
    assert rec.sent == math.ceil(length / tbs) and 0 <= rec.erased <= rec.sent
    lost = 0
    for a in range(0, length, tbs):
        blk, orig = rx[a:a + tbs], x[a:a + tbs]
        if (blk == 0.0).all():
            lost += 1
        else:
            assert blk.tobytes() == orig.tobytes()
    assert lost == rec.erased


def test_reproducible_with_seed():
    x = np.random.default_rng(5).normal(size=500)
    cfg = ErasureChannelCfg(tbs=40, per=0.4)
    a, _ = transmit(x, cfg, link_rng(9, 3, 1, 2, 1))
    b, _ = transmit(x, cfg, link_rng(9, 3, 1, 2, 1))
    c, _ = transmit(x, cfg, link_rng(9, 3, 1, 2, 2))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_keep_mask_batched_shape():
    cfg = ErasureChannelCfg(tbs=40, per=0.5)
    mask, ok = keep_mask(round_rng(0, 0, 1), (16, 16), 64, cfg)
    assert mask.shape == (16, 16, 64) and ok.shape == (16, 16, 2)
    np.testing.assert_array_equal(mask[..., :40], np.repeat(ok[..., :1], 40, axis=-1))
    np.testing.assert_array_equal(mask[..., 40:], np.repeat(ok[..., 1:], 24, axis=-1))
