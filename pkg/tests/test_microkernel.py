import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from directconv.config import EngineConfig
from directconv.errors import InvalidDescriptor, OverflowRisk
from directconv.microkernel import (
    FWD, I16, UPD, MicrokernelDescriptor, RegisterBlocking, build_forward_kernel, build_forward_kernel_i16,
    build_kernel, build_update_kernel, certify_i16, select_register_blocking,
)
from directconv.oracles import conv_forward_naive, conv_update_naive, int_conv_forward_oracle
from directconv.tensors import ConvLayerSpec, error_norms, to_blocked_activation, to_blocked_weight


def fwd_desc(spec, rb_p, rb_q, **kw):
    return MicrokernelDescriptor(pass_=FWD, vlen=spec.vlen, rb_p=rb_p, rb_q=rb_q, R=spec.R, S=spec.S,
                                 stride=spec.stride, in_width=spec.W_p, out_width=spec.Q,
                                 out_p=spec.P, out_q=spec.Q, **kw)


def run_tile(spec, kern, bI, bW, n, kb, cb, oj, oi, O):
    v = spec.vlen
    i_off = ((n * spec.C_b + cb) * spec.H_p + spec.stride * oj) * spec.W_p * v + spec.stride * oi * v
    w_off = (kb * spec.C_b + cb) * spec.R * spec.S * v * v
    o_off = ((n * spec.K_b + kb) * spec.P + oj) * spec.Q * v + oi * v
    kern(bI.data.reshape(-1), i_off, bW.data.reshape(-1), w_off, O.reshape(-1), o_off)


def test_single_call_matches_oracle_restriction():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=10, W=12, R=3, S=3, stride=1)
    rng = np.random.default_rng(3)
    I = rng.uniform(-0.5, 0.5, spec.input_shape()).astype(np.float32)
    W = rng.uniform(-0.5, 0.5, spec.weight_shape()).astype(np.float32)
    kern = build_forward_kernel(fwd_desc(spec, 2, 6))
    O = np.zeros((1, 1, spec.P, spec.Q, 16), np.float32)
    run_tile(spec, kern, to_blocked_activation(I, spec), to_blocked_weight(W, spec), 0, 0, 0, 2, 4, O)
    ref = conv_forward_naive(spec, I.astype(np.float64), W.astype(np.float64))[0, :, 2:4, 4:10].transpose(1, 2, 0)
    assert error_norms(ref, O[0, 0, 2:4, 4:10]).linf_rel <= 1e-6
    # everything outside the tile untouched
    mask = np.ones(O.shape, bool)
    mask[0, 0, 2:4, 4:10] = False
    assert not O[mask].any()


def test_one_by_one_is_small_gemm():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=1, W=8, R=1, S=1)
    rng = np.random.default_rng(0)
    I = rng.standard_normal(spec.input_shape()).astype(np.float32)
    W = rng.standard_normal(spec.weight_shape()).astype(np.float32)
    kern = build_forward_kernel(fwd_desc(spec, 1, 8))
    O = np.zeros((1, 1, 1, 8, 16), np.float32)
    run_tile(spec, kern, to_blocked_activation(I, spec), to_blocked_weight(W, spec), 0, 0, 0, 0, 0, O)
    gemm = W[:, :, 0, 0].astype(np.float64) @ I[0, :, 0, :].astype(np.float64)  # (k, q)
    np.testing.assert_allclose(O[0, 0, 0].T, gemm, rtol=1e-5, atol=1e-5)


def test_zero_input_leaves_output_unchanged():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=4, W=8, R=3, S=3)
    kern = build_forward_kernel(fwd_desc(spec, 1, 8))
    O = np.random.default_rng(1).standard_normal((1, 1, 4, 8, 16)).astype(np.float32)
    before = O.copy()
    bI = to_blocked_activation(np.zeros(spec.input_shape(), np.float32), spec)
    bW = to_blocked_weight(np.ones(spec.weight_shape(), np.float32), spec)
    run_tile(spec, kern, bI, bW, 0, 0, 0, 1, 0, O)
    assert np.array_equal(O, before)


@settings(max_examples=10, deadline=None)
@given(rb=st.sampled_from([(1, 8), (2, 4), (4, 2), (1, 16), (2, 8)]), seed=st.integers(0, 1000))
def test_result_independent_of_register_block(rb, seed):
    spec = ConvLayerSpec(N=1, C=16, K=16, H=4, W=16, R=3, S=3)
    rng = np.random.default_rng(seed)
    bI = to_blocked_activation(rng.standard_normal(spec.input_shape()).astype(np.float32), spec)
    bW = to_blocked_weight(rng.standard_normal(spec.weight_shape()).astype(np.float32), spec)

    def full(rb_p, rb_q):
        kern = build_forward_kernel(fwd_desc(spec, rb_p, rb_q))
        O = np.zeros((1, 1, 4, 16, 16), np.float32)
        for oj in range(0, 4, rb_p):
            for oi in range(0, 16, rb_q):
                run_tile(spec, kern, bI, bW, 0, 0, 0, oj, oi, O)
        return O

    assert np.array_equal(full(*rb), full(1, 8))


def test_i16_kernel_ones_count():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=2, W=8, R=1, S=1)
    d = fwd_desc(spec, 1, 8, dtype=I16, acc_chain_limit=4, in_channels=16)
    kern = build_forward_kernel_i16(d)
    O = np.zeros((1, 1, 2, 8, 16), np.int32)
    bI = to_blocked_activation(np.ones(spec.input_shape(), np.int16), spec)
    bW = to_blocked_weight(np.ones(spec.weight_shape(), np.int16), spec)
    run_tile(spec, kern, bI, bW, 0, 0, 0, 1, 0, O)
    assert (O[0, 0, 1] == 16).all() and not O[0, 0, 0].any()


@pytest.mark.parametrize("limit", [1, 7, 512])
def test_i16_kernel_exact_any_chain_limit(limit):
    spec = ConvLayerSpec(N=1, C=16, K=16, H=6, W=8, R=3, S=3)
    rng = np.random.default_rng(limit)
    I = rng.integers(-256, 256, spec.input_shape(), dtype=np.int16)
    W = rng.integers(-256, 256, spec.weight_shape(), dtype=np.int16)
    kern = build_kernel(fwd_desc(spec, 1, 8, dtype=I16, acc_chain_limit=limit, in_channels=16))
    O = np.zeros((1, 1, 6, 8, 16), np.int32)
    bI, bW = to_blocked_activation(I, spec), to_blocked_weight(W, spec)
    for oj in range(6):
        run_tile(spec, kern, bI, bW, 0, 0, 0, oj, 0, O)
    ref = int_conv_forward_oracle(spec, I, W)[0].transpose(1, 2, 0)
    assert np.array_equal(O[0, 0], ref)


def test_certifier_budgets():
    ok = MicrokernelDescriptor(dtype=I16, acc_chain_limit=512, bound_i=256, bound_w=256, in_channels=512, R=3, S=3)
    certify_i16(ok)
    with pytest.raises(OverflowRisk):
        certify_i16(MicrokernelDescriptor(dtype=I16, acc_chain_limit=4, bound_i=32767, bound_w=32767))
    with pytest.raises(OverflowRisk):
        # chain fits (512 * 2^16 = 2^25) but R*S*C*2^16 = 9*4096*2^16 > 2^31-1
        certify_i16(MicrokernelDescriptor(dtype=I16, acc_chain_limit=512, bound_i=256, bound_w=256,
                                          in_channels=4096, R=3, S=3))
    with pytest.raises(InvalidDescriptor):
        certify_i16(MicrokernelDescriptor(dtype=I16, acc_chain_limit=None))


def test_descriptor_validation():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=7, W=7, R=3, S=3)
    with pytest.raises(InvalidDescriptor):
        build_forward_kernel(fwd_desc(spec, 1, 4))  # 4 accumulators < 8
    with pytest.raises(InvalidDescriptor):
        build_forward_kernel(fwd_desc(spec, 5, 7))  # 35 > 28
    with pytest.raises(InvalidDescriptor):
        build_forward_kernel(fwd_desc(spec, 2, 8))  # RB_Q > Q
    build_forward_kernel(fwd_desc(spec, 1, 4, remainder=True))
    with pytest.raises(InvalidDescriptor):
        build_update_kernel(fwd_desc(spec, 1, 8))
    with pytest.raises(InvalidDescriptor):
        build_forward_kernel(MicrokernelDescriptor(pass_=UPD))


def test_update_kernel_matches_oracle_block():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=6, W=6, R=3, S=3)
    rng = np.random.default_rng(5)
    I = rng.uniform(-0.5, 0.5, spec.input_shape()).astype(np.float32)
    dO = rng.uniform(-0.5, 0.5, spec.output_shape()).astype(np.float32)
    bI = to_blocked_activation(I, spec).data.reshape(-1)
    bO = to_blocked_activation(dO, ConvLayerSpec(N=1, C=16, K=16, H=6, W=6, R=1, S=1)).data.reshape(-1)
    d = MicrokernelDescriptor(pass_=UPD, vlen=16, rb_p=6, rb_q=6, R=3, S=3, in_width=spec.W_p, out_width=6)
    kern = build_update_kernel(d)
    ref = conv_update_naive(spec, I.astype(np.float64), dO.astype(np.float64))
    for r, s in ((0, 0), (1, 2)):
        dw = np.zeros(256, np.float32)
        kern(bI, r * spec.W_p * 16 + s * 16, bO, 0, dw, 0)
        assert error_norms(ref[:, :, r, s].T, dw.reshape(16, 16)).linf_rel <= 1e-6


def test_update_kernel_tiles_compose_bitwise():
    spec = ConvLayerSpec(N=1, C=16, K=16, H=4, W=4, R=1, S=1)
    rng = np.random.default_rng(6)
    I = rng.standard_normal(64 * 16).astype(np.float32)
    dO = rng.standard_normal(64 * 16).astype(np.float32)
    whole = build_update_kernel(MicrokernelDescriptor(pass_=UPD, rb_p=4, rb_q=4, in_width=4, out_width=4))
    half = build_update_kernel(MicrokernelDescriptor(pass_=UPD, rb_p=2, rb_q=4, in_width=4, out_width=4))
    a = np.zeros(256, np.float32)
    whole(I, 0, dO, 0, a, 0)
    b = np.zeros(256, np.float32)
    half(I, 0, dO, 0, b, 0)
    half(I, 2 * 4 * 16, dO, 2 * 4 * 16, b, 0)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("Q,P,lo,expect", [
    (28, 28, 8, RegisterBlocking(1, 28)),
    (7, 7, 8, RegisterBlocking(2, 7, 1, None)),
    (30, 30, 8, RegisterBlocking(1, 28, None, 2)),
    (56, 56, 8, RegisterBlocking(1, 28)),
    (2, 2, 8, RegisterBlocking(2, 2)),
])
def test_register_blocking_selection(Q, P, lo, expect):
    spec = ConvLayerSpec(N=1, C=16, K=16, H=P, W=Q, R=1, S=1)
    assert select_register_blocking(spec, EngineConfig(min_accumulators=lo)) == expect


def test_remainder_variants():
    rb = RegisterBlocking(1, 28, None, 2)
    assert rb.variants() == [(1, 28), (1, 2)]
    assert rb.col_tiles(30) == [(0, 28), (28, 2)]
