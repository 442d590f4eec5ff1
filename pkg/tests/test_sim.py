import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnfold.errors import SimulationError
from attnfold.hw import KernelGranularity, NpuConfig, Settings
from attnfold.pipeline import cost_plan, plan_block
from attnfold.sim import (
    COMPUTE_BOUND,
    MEMORY_BOUND,
    AttentionInputs,
    Schedule,
    SoftmaxPartial,
    account_traffic,
    combine_partials,
    estimate_latency,
    execute_folded,
    execute_unfolded,
    folded_schedule,
    random_inputs,
    reference_attention,
    unfolded_schedule,
)
from attnfold.sim.reference import combine_with_output
from attnfold.tiler import KV_SPLIT, AttentionShape, FoldingPlan, Subvolumes, select_tiling, _strategy

from oracles import naive_attention, one_pass_bytes, unfolded_bytes

GRAN = KernelGranularity()
CFG = NpuConfig()


def shape(heads=1, lq=16, lk=16, d=8, dv=None, bias=False, mask=False, **kw):
    return AttentionShape(heads=heads, lq=lq, lk=lk, d=d, dv=dv or d, has_bias=bias, has_mask=mask, **kw)


def forced_plan(s, rq, rk, level=3, cfg=CFG):
    sv = Subvolumes(rq, rk, s.d, s.dv, s.has_bias, s.has_mask)
    return FoldingPlan(level, s, sv, _strategy(s, sv, cfg), 0)


# ---- dense oracle


def test_reference_scalar():
    z = reference_attention(np.ones((1, 1)), np.ones((1, 1)), np.array([[3.0]]))
    assert z[0, 0] == 3.0


def test_reference_uniform_scores():
    v = np.random.default_rng(0).standard_normal((4, 5))
    z = reference_attention(np.zeros((2, 3)), np.zeros((4, 3)), v)
    np.testing.assert_allclose(z, np.tile(v.mean(axis=0), (2, 1)), atol=1e-15)


def test_reference_vs_naive_loops():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((8, 8)) for _ in range(3))
    b, m = rng.standard_normal((8, 8)), np.where(rng.random((8, 8)) < 0.3, -1e4, 0.0)
    np.testing.assert_allclose(reference_attention(q, k, v, b, m), naive_attention(q, k, v, b, m), rtol=0, atol=1e-13)
    np.testing.assert_allclose(reference_attention(q, k, v), naive_attention(q, k, v), rtol=0, atol=1e-13)


def test_reference_shape_errors():
    with pytest.raises(SimulationError):
        reference_attention(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(SimulationError):
        reference_attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((4, 2)), mask=np.zeros((3, 4)))


# ---- partials


def test_partial_neutral_identity():
    x = SoftmaxPartial.from_scores(np.random.default_rng(0).standard_normal((3, 5)))
    for c in (combine_partials(x, SoftmaxPartial.neutral(3)), combine_partials(SoftmaxPartial.neutral(3), x)):
        np.testing.assert_array_equal(c.m, x.m)
        np.testing.assert_array_equal(c.s, x.s)


def test_partial_uniform_zeros():
    c = combine_partials(SoftmaxPartial.from_scores(np.zeros((1, 2))), SoftmaxPartial.from_scores(np.zeros((1, 2))))
    assert c.m[0] == 0 and c.s[0] == 4
    assert np.exp(0 - c.m[0]) / c.s[0] == 0.25


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.permutations(range(4)))
def test_partial_any_order(seed, order):
    row = np.random.default_rng(seed).standard_normal((1, 32)) * 5
    parts = [SoftmaxPartial.from_scores(row[:, 8 * i:8 * i + 8]) for i in range(4)]
    acc = SoftmaxPartial.neutral(1)
    for i in order:
        acc = combine_partials(acc, parts[i])
    m = row.max()
    assert acc.m[0] == m
    assert abs(acc.s[0] - np.exp(row - m).sum()) < 1e-12


def test_partial_row_mismatch():
    with pytest.raises(SimulationError):
        combine_partials(SoftmaxPartial.neutral(2), SoftmaxPartial.neutral(3))


def test_combine_with_output_matches_dense():
    rng = np.random.default_rng(5)
    s, v = rng.standard_normal((4, 16)), rng.standard_normal((16, 3))
    halves = []
    for sl in (slice(0, 8), slice(8, 16)):
        p = SoftmaxPartial.from_scores(s[:, sl])
        halves.append((p, np.exp(s[:, sl] - p.m[:, None]) @ v[sl]))
    (pa, oa), (pb, ob) = halves
    part, out = combine_with_output(pa, oa, pb, ob)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    np.testing.assert_allclose(out / part.s[:, None], (w @ v) / w.sum(axis=1, keepdims=True), rtol=0, atol=1e-14)


# ---- executors


def test_single_tile_bitwise():
    s = shape(heads=2, lq=16, lk=16, d=16, bias=True, mask=True)
    x = random_inputs(s, np.random.default_rng(0))
    plan = forced_plan(s, 16, 16)
    z, _ = execute_folded(s, plan, x, CFG)
    assert np.array_equal(z, reference_attention(*x.expanded(s)))


def test_kv_split_four_columns():
    s = shape(heads=3, lq=32, lk=64, d=16, mask=True)
    plan = forced_plan(s, 16, 16)
    assert plan.strategy.mode == KV_SPLIT and plan.strategy.reduce_cols == 4
    x = random_inputs(s, np.random.default_rng(1))
    z, sched = execute_folded(s, plan, x, CFG)
    assert np.max(np.abs(z - reference_attention(*x.expanded(s)))) < 1e-12
    assert sched.summary()["l2_hop_bytes"] > 0


def test_level2_same_output_and_sm_writes():
    s = shape(heads=2, lq=32, lk=64, d=16, bias=True)
    x = random_inputs(s, np.random.default_rng(2))
    z3, s3 = execute_folded(s, forced_plan(s, 16, 16, 3), x, CFG)
    z2, s2 = execute_folded(s, forced_plan(s, 16, 16, 2), x, CFG)
    np.testing.assert_allclose(z2, z3, rtol=0, atol=1e-13)
    e = CFG.elem_bytes
    assert s2.dram_by_tensor("write")["SM"] == 2 * 32 * 64 * e
    assert s2.dram_by_tensor("read")["SM"] == 2 * 32 * 64 * e
    assert "SM" not in s3.dram_by_tensor()


def test_folded_rejects_level1_and_mismatch():
    s = shape()
    with pytest.raises(SimulationError):
        execute_folded(s, FoldingPlan(1, s), random_inputs(s, np.random.default_rng(0)), CFG)
    with pytest.raises(SimulationError):
        execute_folded(shape(lq=32), forced_plan(s, 16, 16), random_inputs(shape(lq=32), np.random.default_rng(0)), CFG)


def test_gqa_and_transpose_path():
    s = shape(heads=8, kv_heads=2, lq=32, lk=48, d=16, mask=True, mask_heads=1)
    plan = plan_block(s, Settings())
    assert plan.transpose_plan is not None
    x = random_inputs(s, np.random.default_rng(4))
    z, _ = execute_folded(s, plan, x, CFG)
    assert np.max(np.abs(z - reference_attention(*x.expanded(s)))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3), st.sampled_from([8, 16, 32]), st.sampled_from([8, 16, 32, 64]), st.sampled_from([8, 16]),
    st.booleans(), st.booleans(), st.integers(0, 2**31),
)
def test_unfolded_equals_folded(heads, lq, lk, d, b, m, seed):
    s = shape(heads=heads, lq=lq, lk=lk, d=d, bias=b, mask=m)
    x = random_inputs(s, np.random.default_rng(seed))
    plan = plan_block(s, Settings())
    zf, sf = execute_folded(s, plan, x, CFG)
    zu, su = execute_unfolded(s, x, CFG)
    assert np.max(np.abs(zf - zu)) < 1e-9
    assert account_traffic(su) > account_traffic(sf)


@pytest.mark.parametrize("b,m,kt", list(itertools.product([False, True], [False, True], [False, True])))
def test_unfolded_traffic_oracle(b, m, kt):
    s = shape(heads=4, kv_heads=2, lq=32, lk=64, d=16, dv=24, bias=b, mask=m, k_transpose=kt)
    got = account_traffic(unfolded_schedule(s, CFG))
    assert got == unfolded_bytes(4, 2, 32, 64, 16, 24, s.bias_heads if b else 0, s.mask_heads if m else 0, 2, kt)


def test_mask_adds_a_round_trip():
    base = account_traffic(unfolded_schedule(shape(heads=2, lq=32, lk=32), CFG))
    masked = account_traffic(unfolded_schedule(shape(heads=2, lq=32, lk=32, mask=True), CFG))
    score = 2 * 32 * 32 * 2
    assert masked - base == 2 * score + 2 * 32 * 32 * 2  # extra write+read of the score plus M itself


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 12), st.sampled_from([8, 64, 200, 512]), st.sampled_from([8, 64, 256, 1024]),
    st.sampled_from([32, 64]), st.booleans(), st.booleans(),
)
def test_level3_traffic_is_one_pass(heads, lq, lk, d, b, m):
    s = shape(heads=heads, lq=lq, lk=lk, d=d, bias=b, mask=m)
    plan = select_tiling(s, GRAN, CFG)
    assert plan.folding_level == 3
    sched = folded_schedule(plan, CFG)
    assert set(sched.dram_by_tensor("write")) == {"Z"}
    got = account_traffic(sched)
    assert got == one_pass_bytes(heads, heads, lq, lk, d, d, s.bias_heads if b else 0, s.mask_heads if m else 0, 2)


def test_compute_ops_one_head():
    s = shape(lq=32, lk=64, d=16, dv=24, k_transpose=False)
    expected = 2 * 32 * 64 * 16 + 5 * 32 * 64 + 2 * 32 * 64 * 24
    assert unfolded_schedule(s, CFG).compute_ops == expected
    assert folded_schedule(select_tiling(s, GRAN, CFG), CFG).compute_ops == expected


def test_doubling_lk_doubles_score_traffic():
    def score_bytes(lk):
        d = unfolded_schedule(shape(heads=12, lq=512, lk=lk, d=64), CFG).dram_by_tensor()
        return d["A"] + d["SM"]
    assert score_bytes(2048) == 2 * score_bytes(1024)


def test_estimate_latency_roofline():
    s = unfolded_schedule(shape(heads=12, lq=1024, lk=1024, d=64), CFG)
    r = estimate_latency(s, CFG, 1.0)
    assert r.t_memory == r.dram_bytes / CFG.dram_bw_bytes_per_s
    assert r.t_compute == r.compute_ops / CFG.peak_ops_per_s
    assert r.latency == max(r.t_memory, r.t_compute) and r.bound == MEMORY_BOUND
    small = estimate_latency(folded_schedule(select_tiling(shape(lq=64, lk=64, d=64), GRAN, CFG), CFG), CFG, 1 / 32)
    assert small.bound == COMPUTE_BOUND
    with pytest.raises(ValueError):
        estimate_latency(s, CFG, 0)
    assert estimate_latency(Schedule([]), CFG, 1.0).latency == 0


def test_level1_speedup_is_one():
    plan = plan_block(shape(lq=8, lk=8, d=512), Settings(npu=NpuConfig(l1_bytes=4096)))
    assert plan.folding_level == 1
    c = cost_plan(plan, Settings(npu=NpuConfig(l1_bytes=4096)))
    assert c.speedup == 1.0 and c.folded == c.unfolded


def test_inputs_validation():
    s = shape(mask=True)
    x = random_inputs(shape(), np.random.default_rng(0))
    with pytest.raises(SimulationError):
        x.normalized(s)
    with pytest.raises(SimulationError):
        AttentionInputs(np.zeros((16, 4)), x.k, x.v).normalized(shape())
