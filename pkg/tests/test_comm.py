import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resist.comm import (
    Codec,
    CommLedger,
    compress_params,
    dequantize,
    densify,
    quantize,
    round_volume,
    sparsify_topk,
    traffic,
)
from resist.partition import full_plan, make_plan
from resist.resnet import ModelConfig, init_params

TOY = ModelConfig(depth_H=20, width_m=10, input_dim_d=10, partition_lo=3, partition_hi=20)


def test_toy_volumes_match_hand_count():
    # W1 100 + 19 blocks of 100 + a 10
    assert TOY.param_count == 100 + 19 * 100 + 10 == 2010
    plan = make_plan(TOY, 2, 0, 0)
    views = [TOY.param_count - (18 - len(m.held_partitionable(TOY))) * 100 for m in plan.masks]
    assert views == [1110, 1110]
    assert round_volume(plan, TOY, "resist", 64) == 2 * (1110 + 1110) * 8 == 35_520
    assert round_volume(plan, TOY, "local_sgd", 64) == 2 * 2 * 2010 * 8 == 64_320
    assert round_volume(plan, TOY, "data_parallel", 64) == 64_320


def test_single_worker_volumes_coincide():
    plan = make_plan(TOY, 1, 0, 0)
    for bits in (4, 8, 32, 64):
        assert round_volume(plan, TOY, "resist", bits) == round_volume(plan, TOY, "local_sgd", bits)


@pytest.mark.parametrize("S", [2, 3, 4, 8])
def test_resist_volume_below_local_sgd(S):
    for seed in range(10):
        plan = make_plan(TOY, S, seed, seed)
        if plan.multiplicity().min() == 1:
            assert round_volume(plan, TOY, "resist") < round_volume(plan, TOY, "local_sgd")


def test_traffic_split_and_ledger_conservation():
    ledger = CommLedger()
    total = 0
    for t in range(5):
        plan = make_plan(TOY, 4, t, 1)
        shared, part = traffic(plan, TOY)
        assert shared == 2 * 4 * (100 + 100 + 10) * 8
        ledger.record(t, shared, part)
        total += round_volume(plan, TOY, "resist")
    assert ledger.cumulative == total == sum(e.total_bytes for e in ledger.entries)


def test_codec_traffic():
    plan = full_plan(TOY, 2)
    assert sum(traffic(plan, TOY, Codec("quantize", bits=8))) == round_volume(plan, TOY, "local_sgd", 8)
    shared, part = traffic(plan, TOY, Codec("topk", frac=0.25))
    per_worker = (25 + 25 + 3) * 96 + 18 * 25 * 96
    assert shared + part == 2 * 2 * per_worker // 8


def test_quantize_constant_array():
    for bits in (1, 4, 8, 16):
        out = dequantize(quantize([3.7, 3.7, 3.7], bits))
        assert out.tolist() == [3.7, 3.7, 3.7]


@pytest.mark.parametrize("bits", [4, 8])
def test_quantize_error_bound(bits):
    rng = np.random.default_rng(bits)
    v = rng.uniform(-1, 1, 100_000)
    v[0], v[1] = -1.0, 1.0
    q = quantize(v, bits)
    err = np.max(np.abs(dequantize(q) - v))
    step = 2.0 / (2**bits - 1)
    assert err <= step / 2 * (1 + 1e-12)
    if bits == 8:
        assert step / 2 == pytest.approx(0.00392, abs=1e-5)
    assert q.codes.max() < 2**bits


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60), st.integers(1, 16))
def test_quantize_properties(values, bits):
    v = np.array(values)
    q = quantize(v, bits)
    assert q.lo <= q.hi
    assert q.codes.max() <= 2**bits - 1
    err = np.max(np.abs(dequantize(q) - v))
    assert err <= (q.hi - q.lo) / (2 * (2**bits - 1)) + 1e-9 * max(1.0, abs(q.hi), abs(q.lo))
    again = quantize(dequantize(q), bits)
    assert np.array_equal(again.codes, q.codes)


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize([1.0, np.inf], 8)
    with pytest.raises(ValueError):
        quantize([1.0], 0)


def test_topk_examples():
    sp = sparsify_topk([-5.0, 1.0, 3.0, -2.0], 0.5)
    assert sp.indices.tolist() == [0, 2]
    assert sp.values.tolist() == [-5.0, 3.0]
    v = np.array([0.3, -1.2, 4.0])
    assert densify(sparsify_topk(v, 1.0)).tolist() == v.tolist()
    tie = sparsify_topk([1.0, -1.0, 1.0, 0.5], 0.5)
    assert tie.indices.tolist() == [0, 1]
    with pytest.raises(ValueError):
        sparsify_topk([], 0.5)
    with pytest.raises(ValueError):
        sparsify_topk([1.0], 0.0)


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        v = rng.integers(-5, 6, n).astype(float) if rng.random() < 0.3 else rng.standard_normal(n)
        frac = float(rng.uniform(0.01, 1.0))
        k = math.ceil(frac * n)
        ranked = sorted(range(n), key=lambda i: (-abs(v[i]), i))
        assert sorted(ranked[:k]) == sparsify_topk(v, frac).indices.tolist()
        dense = densify(sparsify_topk(v, frac))
        assert np.count_nonzero(dense[[i for i in range(n) if i not in ranked[:k]]]) == 0


def test_compress_params_keeps_absent_blocks():
    cfg = ModelConfig(depth_H=3, width_m=4, input_dim_d=2)
    p = init_params(cfg, 0)
    p.blocks[1] = None
    out = compress_params(p, Codec("quantize", bits=8))
    assert out.blocks[1] is None
    assert np.max(np.abs(out.blocks[0] - p.blocks[0])) <= (p.blocks[0].max() - p.blocks[0].min()) / 510 + 1e-15
    assert compress_params(p, None) is p


def test_compress_delta_quantizes_the_difference():
    from resist.comm import compress_delta
    from resist.resnet import GlobalParams

    rng = np.random.default_rng(0)
    ref = GlobalParams([rng.standard_normal((4, 3)), rng.standard_normal((4, 4))], rng.standard_normal(4))
    new = GlobalParams([ref.blocks[0] + 1e-3 * rng.standard_normal((4, 3)), None], ref.a + 1e-3)
    codec = Codec("quantize", bits=8)
    got = compress_delta(new, ref, codec)
    assert got.blocks[1] is None
    diff = new.blocks[0] - ref.blocks[0]
    step = (diff.max() - diff.min()) / 255
    assert np.max(np.abs(got.blocks[0] - new.blocks[0])) <= step / 2 + 1e-15
    # a constant difference has zero range, so only the final addition rounds
    np.testing.assert_allclose(got.a, new.a, rtol=0, atol=1e-15)
    assert compress_delta(new, ref, None) is new
