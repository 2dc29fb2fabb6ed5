import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from directconv.errors import EmptyTrace, PlanInfeasible, PlanTensorMismatch
from directconv.layers import resnet50_layer
from directconv.streams import (
    APPLY, CONV, CONV_STREAK, FusedOp, Segment, decode_segments, dryrun_forward, encode_segments,
    execute_loop_nest, load_plan, replay_all, save_plan, validate_plan,
)
from directconv.tensors import BlockedActivation, ConvLayerSpec, to_blocked_activation, to_blocked_weight


def operands(spec, seed=0):
    rng = np.random.default_rng(seed)
    bI = to_blocked_activation(rng.uniform(-0.5, 0.5, spec.input_shape()).astype(np.float32), spec)
    bW = to_blocked_weight(rng.uniform(-0.5, 0.5, spec.weight_shape()).astype(np.float32), spec)
    return bI, bW


def kinds(trace):
    return [CONV if x == CONV else APPLY for x in trace]


def test_encode_examples():
    assert encode_segments([CONV] * 3) == [Segment(CONV_STREAK, 3)]
    assert encode_segments([CONV, APPLY, CONV, APPLY]) == [
        Segment(CONV_STREAK, 1), Segment(APPLY, None), Segment(CONV_STREAK, 1), Segment(APPLY, None)]
    with pytest.raises(EmptyTrace):
        encode_segments([])


@given(st.lists(st.sampled_from([CONV, APPLY]), min_size=1, max_size=60))
def test_encode_decode_round_trip(trace):
    segs = encode_segments(trace)
    assert decode_segments(segs) == trace
    # maximal runs: no two streaks adjacent
    assert all(not (a.type == b.type == CONV_STREAK) for a, b in zip(segs, segs[1:]))


def test_fusion_trace_example():
    spec = ConvLayerSpec(N=1, C=32, K=16, H=1, W=56, R=3, S=3)
    plan = dryrun_forward(spec, fusion=FusedOp("RELU"))
    assert (spec.K_b, spec.C_b) == (1, 2)
    assert kinds(plan.threads[0].trace()) == [CONV, CONV, CONV, APPLY, CONV, APPLY]
    assert [s.type for s in plan.threads[0].segments] == [CONV_STREAK, APPLY, CONV_STREAK, APPLY]
    assert [s.info for s in plan.threads[0].segments if s.type == CONV_STREAK] == [3, 1]


def test_unfused_plan_is_one_streak_per_thread():
    plan = dryrun_forward(resnet50_layer(8, N=2), threads=4)
    for tp in plan.threads:
        assert len(tp.segments) == 1 and tp.segments[0].type == CONV_STREAK


def test_remainder_variant_alternates():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=2, W=30, R=3, S=3)
    plan = dryrun_forward(spec)
    assert plan.var_rb.tolist() == [[1, 28], [1, 2]]
    assert plan.threads[0].streams.var.tolist() == [0, 1, 0, 1]


def test_prefetch_chaining():
    plan = dryrun_forward(resnet50_layer(13), threads=2)
    for tp in plan.threads:
        st_ = tp.streams
        assert np.array_equal(st_.pf_inp[:-1], st_.inp[1:])
        assert np.array_equal(st_.pf_wt[:-1], st_.wt[1:])
        assert st_.pf_out[-1] == st_.out[-1]


def test_validate_detects_faults():
    plan = dryrun_forward(resnet50_layer(13), threads=2)
    assert validate_plan(plan) == []
    bad = dryrun_forward(resnet50_layer(13), threads=2)
    bad.threads[0].streams.out[3] = bad.threads[0].streams.out[4]
    assert any("coverage" in v for v in validate_plan(bad))
    shuffled = dryrun_forward(resnet50_layer(13), threads=2)
    shuffled.threads[1].streams.pf_inp[:] = shuffled.threads[1].streams.pf_inp[::-1]
    assert any("chain" in v for v in validate_plan(shuffled))


def test_too_many_threads_is_infeasible():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=1, W=8, R=1, S=1)
    with pytest.raises(PlanInfeasible):
        dryrun_forward(spec, threads=2)


@settings(max_examples=12, deadline=None)
@given(layer=st.sampled_from([2, 4, 8, 13, 16, 18, 19]), T=st.sampled_from([1, 2, 3, 4]))
def test_replay_matches_loop_nest_and_is_idempotent(layer, T):
    spec = resnet50_layer(layer, N=1)
    plan = dryrun_forward(spec, threads=T)
    bI, bW = operands(spec, layer)
    a = np.zeros(plan.output_shape(), np.float32)
    b = np.zeros_like(a)
    c = np.zeros_like(a)
    replay_all(plan, bI, bW, a)
    replay_all(plan, bI, bW, b)
    execute_loop_nest(plan, bI, bW, c)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_replay_results_independent_of_threads():
    spec = resnet50_layer(13, N=2)
    bI, bW = operands(spec)
    outs = []
    for T in (1, 3, 8):
        plan = dryrun_forward(spec, threads=T)
        O = np.zeros(plan.output_shape(), np.float32)
        replay_all(plan, bI, bW, O)
        outs.append(O)
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


@pytest.mark.parametrize("kind", ["RELU", "BIAS_RELU", "BIAS_ADD"])
def test_fused_equals_unfused_then_op(kind):
    spec = resnet50_layer(13, N=1)
    bI, bW = operands(spec)
    bias = np.random.default_rng(9).uniform(-0.5, 0.5, spec.K).astype(np.float32)
    op = FusedOp(kind, None if kind == "RELU" else bias)
    plain = dryrun_forward(spec, threads=2)
    fused = dryrun_forward(spec, threads=2, fusion=op)
    a = np.zeros(plain.output_shape(), np.float32)
    b = np.zeros_like(a)
    replay_all(plain, bI, bW, a)
    replay_all(fused, bI, bW, b)
    ref = op.apply_blocked(BlockedActivation(a, spec.K, 0, 0)).data
    assert np.array_equal(ref.view(np.uint32), b.view(np.uint32))


def test_replay_rejects_wrong_tensors():
    spec = resnet50_layer(18)
    plan = dryrun_forward(spec)
    bI, bW = operands(spec)
    with pytest.raises(PlanTensorMismatch):
        replay_all(plan, bI.with_halo(0, 0), bW, np.zeros(plan.output_shape(), np.float32))
    with pytest.raises(PlanTensorMismatch):
        replay_all(plan, bI, bW, np.zeros(plan.output_shape(), np.float64))


def test_plan_serialization_round_trip(tmp_path):
    spec = resnet50_layer(8, N=2)
    bias = np.linspace(-1, 1, spec.K).astype(np.float32)
    plan = dryrun_forward(spec, threads=3, fusion=FusedOp("BIAS_RELU", bias))
    save_plan(plan, tmp_path / "plan.json")
    back = load_plan(tmp_path / "plan.json")
    assert validate_plan(back) == []
    bI, bW = operands(spec)
    a = np.zeros(plan.output_shape(), np.float32)
    b = np.zeros_like(a)
    replay_all(plan, bI, bW, a)
    replay_all(back, bI, bW, b)
    assert np.array_equal(a, b)


def test_fused_op_requires_bias():
    with pytest.raises(ValueError):
        FusedOp("BIAS_RELU")
    with pytest.raises(ValueError):
        FusedOp("GELU")
