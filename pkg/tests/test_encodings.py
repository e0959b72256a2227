import math

import numpy as np
import pytest

from dietattn.config import AttentionConfig, PositionScheme
from dietattn.encodings import (BiasCache, SegmentMap, build_cache,
                                init_params, positional_bias, relative_offset,
                                segment_bias, sinusoidal_table, t5_bucket)
from dietattn.errors import ConfigError, SchemeError, StaleCacheError
from dietattn.rng import Rng
from dietattn.tensor import Matrix

from oracles import (np_diet_abs_bias, np_diet_rel_bias, np_segment_bias,
                     np_sinusoidal, np_t5_bias, ref_t5_bucket, to_np)


# ------------------------------------------------------------- t5 buckets

@pytest.mark.parametrize("nb,md", [(8, 16), (32, 128), (4, 3), (16, 48)])
def test_t5_bucket_matches_reference(nb, md):
    for off in range(-md - 20, md + 21):
        assert t5_bucket(off, nb, md) == ref_t5_bucket(off, nb, md), off


def test_t5_bucket_properties():
    nb, md = 32, 128
    buckets_pos = [t5_bucket(o, nb, md) for o in range(0, 400)]
    buckets_neg = [t5_bucket(-o, nb, md) for o in range(1, 400)]
    assert t5_bucket(0, nb, md) == 0
    # nonnegative offsets fill [0, nb/2), negatives fill [nb/2, nb)
    assert set(buckets_pos) == set(range(nb // 2))
    assert set(buckets_neg) == set(range(nb // 2, nb))
    # monotone per sign
    assert buckets_pos == sorted(buckets_pos)
    assert buckets_neg == sorted(buckets_neg)
    # saturates at the edges
    assert t5_bucket(10 ** 6, nb, md) == nb // 2 - 1
    assert t5_bucket(-10 ** 6, nb, md) == nb - 1


def test_t5_bucket_small_exact_region():
    # max_exact = (nb/2)//2; below it, bucket index equals the offset itself
    nb = 16
    for off in range(4):
        assert t5_bucket(off, nb, 48) == off
        assert t5_bucket(-off - 1, nb, 48) == 8 + off


def test_relative_offset_store_index():
    n = 5
    for i in range(n):
        for j in range(n):
            off = relative_offset(i, j)
            assert off == i - j
            # table layout: offset -(n-1)..(n-1) maps to slot off + n - 1
            assert 0 <= off + n - 1 < 2 * n - 1


# ------------------------------------------------------------- sinusoidal

@pytest.mark.parametrize("n,d", [(8, 16), (5, 7), (1, 4)])
def test_sinusoidal_matches_reference(n, d):
    got = to_np(sinusoidal_table(n, d))
    np.testing.assert_allclose(got, np_sinusoidal(n, d), rtol=1e-12, atol=1e-15)


def test_sinusoidal_first_row():
    t = to_np(sinusoidal_table(4, 6))
    np.testing.assert_array_equal(t[0], [0, 1, 0, 1, 0, 1])


# ------------------------------------------------------------ segment map

def test_segment_map_contiguous_validation():
    sm = SegmentMap([0, 0, 1, 1, 1, 2])
    assert sm.num_segments == 3
    assert sm.n == 6
    with pytest.raises(ConfigError):
        SegmentMap([0, 1, 0])  # revisits segment 0
    with pytest.raises(ConfigError):
        SegmentMap([])
    with pytest.raises(ConfigError):
        SegmentMap([0, 0, 1], num_segments=1)  # id out of range
    # any ordering of contiguous runs is fine, ids need not be sorted
    assert SegmentMap([1, 1, 0]).num_segments == 2
    assert SegmentMap([0, 2]).num_segments == 3


def test_segment_map_constructors():
    sm = SegmentMap.from_lengths([2, 3])
    assert list(sm.assignment) == [0, 0, 1, 1, 1]
    u = SegmentMap.uniform(6)
    assert list(u.assignment) == [0] * 6
    assert u.num_segments == 1
    with pytest.raises(ConfigError):
        SegmentMap.from_lengths([2, 0])
    assert SegmentMap.from_lengths([2, 3]).key() == SegmentMap([0, 0, 1, 1, 1]).key()


def test_segment_bias_values():
    sm = SegmentMap([0, 0, 1])
    s = Matrix(2, 2)
    s.data[:] = type(s.data)("d", [1.0, 2.0, 3.0, 4.0])
    got = to_np(segment_bias(s, sm))
    np.testing.assert_array_equal(
        got, np_segment_bias([1, 2, 3, 4], [0, 0, 1], 2))


# ------------------------------------------------------- parameter layout

def make_params(scheme, sharing="none", layers=2, h=4, n=8, d=8, seed=3, **kw):
    cfg = AttentionConfig(n=n, d=d, h=h, scheme=scheme, sharing=sharing,
                          layers=layers, **kw)
    return cfg, init_params(cfg, seed)


def test_slot_census_matches_sharing():
    for sharing, want in (("none", 8), ("layer", 4), ("head", 2)):
        _, params = make_params(PositionScheme.diet_rel(), sharing=sharing)
        assert len(params.slots) == want


def test_slot_routing_under_sharing():
    cfg, params = make_params(PositionScheme.diet_rel(), sharing="layer")
    # layer-wise sharing: every layer maps to the same per-head slot
    assert params.slot_of(0, 2) == params.slot_of(1, 2) == 2
    cfg, params = make_params(PositionScheme.diet_rel(), sharing="head")
    assert params.slot_of(1, 0) == params.slot_of(1, 3) == 1


def test_named_tensors_and_trainables():
    cfg, params = make_params(PositionScheme.diet_abs(4))
    names = [k for k, _ in params.named_tensors()]
    assert "diet-abs/layer0.head0/p_q" in names
    assert "diet-abs/layer1.head3/p_k" in names
    assert len(names) == 16
    trainable = dict(params.trainables())
    assert len(trainable) == 16

    cfg, params = make_params(PositionScheme.sinusoidal())
    assert dict(params.named_tensors())  # the fixed table is still listed
    assert dict(params.trainables()) == {}  # but not trainable


def test_scalar_tables_start_at_zero_but_embeddings_do_not():
    _, params = make_params(PositionScheme.diet_rel())
    assert to_np(params.slots[0]["r"]).sum() == 0.0
    _, params = make_params(PositionScheme.t5(8, 16))
    assert to_np(params.slots[0]["bucket"]).sum() == 0.0
    _, params = make_params(PositionScheme.diet_abs(4))
    assert to_np(params.slots[0]["p_q"]).std() > 0.0


def test_param_init_deterministic_per_slot():
    _, a = make_params(PositionScheme.diet_abs(4), seed=9)
    _, b = make_params(PositionScheme.diet_abs(4), seed=9)
    for (ka, ma), (kb, mb) in zip(a.named_tensors(), b.named_tensors()):
        assert ka == kb and ma.equals_bitwise(mb)
    _, c = make_params(PositionScheme.diet_abs(4), seed=10)
    assert not dict(c.named_tensors())["diet-abs/layer0.head0/p_q"].equals_bitwise(
        dict(a.named_tensors())["diet-abs/layer0.head0/p_q"])


# ------------------------------------------------------------- bias math

def test_diet_abs_bias_matches_numpy():
    cfg, params = make_params(PositionScheme.diet_abs(4))
    slot = params.slots[params.slot_of(1, 2)]
    got = to_np(params.slot_bias(params.slot_of(1, 2), cfg.n))
    want = np_diet_abs_bias(to_np(slot["p_q"]), to_np(slot["p_k"]))
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-14)


def test_diet_rel_bias_is_toeplitz_and_matches_numpy():
    cfg, params = make_params(PositionScheme.diet_rel(), n=6)
    slot_id = params.slot_of(0, 1)
    r = params.slots[slot_id]["r"]
    Rng(5, "fill").fill_normal(r.data, 1.0)
    params.bump()
    got = to_np(params.slot_bias(slot_id, 6))
    np.testing.assert_array_equal(got, np_diet_rel_bias(to_np(r).reshape(-1), 6))
    for i in range(5):
        for j in range(5):
            assert got[i, j] == got[i + 1, j + 1]


def test_t5_bias_matches_numpy():
    cfg, params = make_params(PositionScheme.t5(8, 16), n=7)
    slot_id = params.slot_of(1, 0)
    tab = params.slots[slot_id]["bucket"]
    Rng(6, "fill").fill_normal(tab.data, 1.0)
    params.bump()
    got = to_np(params.slot_bias(slot_id, 7))
    np.testing.assert_array_equal(
        got, np_t5_bias(to_np(tab).reshape(-1), 7, 8, 16))


def test_per_head_segment_term_added():
    cfg, params = make_params(PositionScheme.diet_rel(), n=6,
                              num_segments=2, segment_location="per_head")
    sm = SegmentMap.from_lengths([3, 3])
    slot_id = params.slot_of(0, 0)
    seg = params.slots[slot_id]["seg"]
    seg.data[0] = 5.0
    seg.data[3] = -2.0
    params.bump()
    with_seg = to_np(params.slot_bias(slot_id, 6, sm))
    without = to_np(params.slot_bias(slot_id, 6))
    np.testing.assert_array_equal(
        with_seg - without,
        np_segment_bias([5.0, 0.0, 0.0, -2.0], sm.assignment, 2))


def test_segment_bias_requires_per_head_location():
    cfg, params = make_params(PositionScheme.diet_rel(), n=6)
    sm = SegmentMap.from_lengths([3, 3])
    with pytest.raises(ConfigError):
        params.slot_bias(0, 6, sm)


def test_slot_bias_refuses_non_bias_schemes():
    cfg, params = make_params(PositionScheme.shaw(3))
    with pytest.raises(SchemeError):
        params.slot_bias(0, 8)
    cfg, params = make_params(PositionScheme.diet_abs(4), linformer_k=4)
    with pytest.raises(SchemeError):
        params.slot_bias(0, 8)  # rectangular bias lives elsewhere


def test_linformer_bias_shape_and_values():
    cfg, params = make_params(PositionScheme.diet_abs(3), linformer_k=4, n=8)
    b = params.linformer_slot_bias(0)
    assert (b.rows, b.cols) == (8, 4)
    slot = params.slots[0]
    np.testing.assert_allclose(
        to_np(b), np_diet_abs_bias(to_np(slot["p_q"]), to_np(slot["p_k"])),
        rtol=1e-13)
    assert params.tables["e"].rows == 4 and params.tables["e"].cols == 8


def test_positional_bias_wrapper():
    cfg, params = make_params(PositionScheme.diet_abs(4), sharing="head")
    direct = params.slot_bias(params.slot_of(1, 3), cfg.n)
    assert positional_bias(params, 1, 3, cfg.n).equals_bitwise(direct)


def test_zero_positional_keeps_projection():
    cfg, params = make_params(PositionScheme.diet_abs(3), linformer_k=4, n=8)
    e_before = params.tables["e"].copy()
    params.zero_positional()
    assert to_np(params.slots[0]["p_q"]).sum() == 0.0
    assert params.tables["e"].equals_bitwise(e_before)


def test_shaw_index_clipping():
    cfg, params = make_params(PositionScheme.shaw(2), n=6)
    idx = params.shaw_index(6)
    # entry (i, j) stores clamp(j - i) + clip
    assert idx[0 * 6 + 5] == 4  # far right clamps to +clip
    assert idx[5 * 6 + 0] == 0  # far left clamps to -clip
    assert idx[3 * 6 + 3] == 2  # diagonal is offset 0


# ------------------------------------------------------------------ cache

def test_cache_matches_direct_and_staleness():
    cfg, params = make_params(PositionScheme.diet_rel(), n=6)
    r = params.slots[0]["r"]
    Rng(7, "fill").fill_normal(r.data, 1.0)
    params.bump()
    cache = build_cache(params, 6)
    assert cache.bias(0, 0).equals_bitwise(params.slot_bias(0, 6))
    r.data[0] += 1.0
    params.bump()
    with pytest.raises(StaleCacheError):
        cache.check(params)
    fresh = build_cache(params, 6)
    fresh.check(params)
    assert fresh.bias(0, 0).equals_bitwise(params.slot_bias(0, 6))


def test_cache_covers_linformer_bias():
    cfg, params = make_params(PositionScheme.diet_abs(3), linformer_k=4, n=8)
    cache = build_cache(params, 8)
    assert cache.bias(0, 0).equals_bitwise(params.linformer_slot_bias(0))


def test_cache_with_segments():
    cfg, params = make_params(PositionScheme.t5(8, 16), n=6,
                              num_segments=3, segment_location="per_head")
    sm = SegmentMap.from_lengths([2, 2, 2])
    seg = params.slots[0]["seg"]
    seg.data[4] = 2.0
    params.bump()
    cache = build_cache(params, 6, sm)
    assert cache.bias(0, 0).equals_bitwise(params.slot_bias(0, 6, sm))
