import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resist.partition import PartitionPlan, deal, extract_view, full_plan, make_plan
from resist.resnet import ModelConfig, init_params


def cfg_with(P, min_depth=1, m=3):
    # blocks 2..P+1 partitionable, block 1 shared
    return ModelConfig(depth_H=P + 1, width_m=m, input_dim_d=2, min_depth=min_depth)


def counts(plan, cfg):
    return [len(mask.held_partitionable(cfg)) for mask in plan.masks]


def test_two_workers_split_eight_blocks_disjointly():
    cfg = cfg_with(8)
    for seed in range(20):
        plan = make_plan(cfg, 2, 0, seed)
        held = [set(mask.held_partitionable(cfg)) for mask in plan.masks]
        assert [len(s) for s in held] == [4, 4]
        assert not held[0] & held[1]
        assert held[0] | held[1] == set(cfg.partitionable)


def test_single_worker_holds_everything():
    cfg = cfg_with(5, min_depth=2)
    plan = make_plan(cfg, 1, 3, 9)
    assert plan.masks[0].bits.all()


def test_min_depth_top_up():
    cfg = cfg_with(8, min_depth=5)
    for seed in range(100):
        plan = make_plan(cfg, 4, 0, seed)
        assert min(counts(plan, cfg)) >= 5
        mult = plan.multiplicity()[1:]
        assert mult.min() >= 1
        assert mult.sum() >= 20


def test_shared_blocks_always_held():
    cfg = ModelConfig(depth_H=10, width_m=3, input_dim_d=2, partition_lo=4, partition_hi=8)
    plan = make_plan(cfg, 3, 1, 1)
    assert plan.shared_blocks == (1, 2, 3, 9, 10)
    for mask in plan.masks:
        assert all(mask[h] for h in plan.shared_blocks)


@settings(max_examples=60, deadline=None)
@given(P=st.integers(1, 12), S=st.integers(1, 9), seed=st.integers(0, 2**40), rnd=st.integers(0, 1000),
       md=st.integers(1, 12))
def test_plan_invariants(P, S, seed, rnd, md):
    cfg = cfg_with(P, min_depth=min(md, P))
    plan = make_plan(cfg, S, rnd, seed)
    assert len(plan.masks) == S
    assert plan.multiplicity()[1:].min() >= 1
    assert min(counts(plan, cfg)) >= min(cfg.min_depth, P)
    dealt, _ = deal(cfg, S, rnd, seed)
    sizes = [len(d) for d in dealt]
    assert max(sizes) - min(sizes) <= 1
    assert make_plan(cfg, S, rnd, seed).to_json() == plan.to_json()


def test_rounds_and_seeds_change_the_plan():
    cfg = cfg_with(10)
    plans = {make_plan(cfg, 2, r, 0).to_json() for r in range(10)}
    assert len(plans) > 1
    seeds = {make_plan(cfg, 2, 0, s).to_json() for s in range(10)}
    assert len(seeds) > 1


def test_assignment_frequency_is_uniform():
    # worker 0's hit rate for each block, against an empirical baseline pooled over blocks
    cfg = cfg_with(6, min_depth=2)
    S, rounds = 4, 10_000
    hits = np.zeros(6)
    for r in range(rounds):
        hits += make_plan(cfg, S, r, 123).masks[0].bits[1:]
    freq = hits / rounds
    p = freq.mean()
    se = np.sqrt(p * (1 - p) / rounds)
    assert np.all(np.abs(freq - p) <= 3 * se + 1e-12), (freq, p, se)
    # dealing alone gives 1/S; two forced extra blocks out of 6 lift worker 0 above it
    assert p > 1 / S


def test_plan_json_round_trip():
    cfg = cfg_with(6, min_depth=2)
    plan = make_plan(cfg, 3, 4, 5)
    back = PartitionPlan.from_json(plan.to_json(), cfg)
    assert back.to_json() == plan.to_json()
    assert back.round_index == 4 and back.S == 3


def test_extract_view_counts():
    cfg = cfg_with(6, m=4)
    params = init_params(cfg, 0)
    full = extract_view(params, full_plan(cfg, 1), 0)
    assert full.param_count == params.param_count == cfg.param_count
    plan = make_plan(cfg, 3, 0, 0)
    for v in range(3):
        view = extract_view(params, plan, v)
        k = len(plan.masks[v].held_partitionable(cfg))
        assert view.param_count == cfg.param_count - (6 - k) * 16
        for h in cfg.partitionable:
            assert (view.params.block(h) is None) != plan.masks[v][h]
    with pytest.raises(IndexError):
        extract_view(params, plan, 3)


def test_extract_view_copies():
    cfg = cfg_with(2)
    params = init_params(cfg, 0)
    view = extract_view(params, full_plan(cfg, 1), 0)
    view.params.blocks[0][0, 0] += 1.0
    assert params.blocks[0][0, 0] != view.params.blocks[0][0, 0]
