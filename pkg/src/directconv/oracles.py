"""Reference implementations used as ground truth.

These follow the seven-loop formulation literally, with logical zero padding
handled by bounds checks. Floating point accumulation is done in float64 and
integer accumulation in int64, so the oracles never share rounding or
overflow behavior with the blocked engine.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import ShapeMismatch
from .tensors import ConvLayerSpec


def _check(x: np.ndarray, shape: tuple, name: str) -> None:
    if tuple(x.shape) != tuple(shape):
        raise ShapeMismatch(f"{name} shape {tuple(x.shape)} != expected {tuple(shape)}")


def _float_out_dtype(*arrays) -> np.dtype:
    return np.dtype(np.float64) if any(a.dtype == np.float64 for a in arrays) else np.dtype(np.float32)


@njit(cache=True, nogil=True)
def _naive_fwd(I, W, O, stride, ph, pw):
    N, C, H, Wd = I.shape
    K, _, R, S = W.shape
    _, _, P, Q = O.shape
    for n in range(N):
        for k in range(K):
            for c in range(C):
                for oj in range(P):
                    for oi in range(Q):
                        ij = stride * oj - ph
                        ii = stride * oi - pw
                        for r in range(R):
                            y = ij + r
                            if y < 0 or y >= H:
                                continue
                            for s in range(S):
                                x = ii + s
                                if x < 0 or x >= Wd:
                                    continue
                                O[n, k, oj, oi] += I[n, c, y, x] * W[k, c, r, s]


@njit(cache=True, nogil=True)
def _naive_bwd(dO, W, dI, stride, ph, pw):
    N, C, H, Wd = dI.shape
    K, _, R, S = W.shape
    _, _, P, Q = dO.shape
    for n in range(N):
        for k in range(K):
            for c in range(C):
                for oj in range(P):
                    for oi in range(Q):
                        ij = stride * oj - ph
                        ii = stride * oi - pw
                        for r in range(R):
                            y = ij + r
                            if y < 0 or y >= H:
                                continue
                            for s in range(S):
                                x = ii + s
                                if x < 0 or x >= Wd:
                                    continue
                                dI[n, c, y, x] += dO[n, k, oj, oi] * W[k, c, r, s]


@njit(cache=True, nogil=True)
def _naive_upd(I, dO, dW, stride, ph, pw):
    N, C, H, Wd = I.shape
    K, _, R, S = dW.shape
    _, _, P, Q = dO.shape
    for n in range(N):
        for k in range(K):
            for c in range(C):
                for oj in range(P):
                    for oi in range(Q):
                        ij = stride * oj - ph
                        ii = stride * oi - pw
                        for r in range(R):
                            y = ij + r
                            if y < 0 or y >= H:
                                continue
                            for s in range(S):
                                x = ii + s
                                if x < 0 or x >= Wd:
                                    continue
                                dW[k, c, r, s] += I[n, c, y, x] * dO[n, k, oj, oi]


@njit(cache=True)
def _count_loop_body(N, K, C, P, Q, R, S):
    count = 0
    for n in range(N):
        for k in range(K):
            for c in range(C):
                for oj in range(P):
                    for oi in range(Q):
                        for r in range(R):
                            for s in range(S):
                                count += 1
    return count


def conv_forward_naive(spec: ConvLayerSpec, I: np.ndarray, W: np.ndarray) -> np.ndarray:
    _check(I, spec.input_shape(), "I")
    _check(W, spec.weight_shape(), "W")
    if np.issubdtype(I.dtype, np.integer) or np.issubdtype(W.dtype, np.integer):
        raise TypeError("use int_conv_forward_oracle for integer tensors")
    out_dtype = _float_out_dtype(I, W)
    O = np.zeros(spec.output_shape(), dtype=np.float64)
    _naive_fwd(I.astype(np.float64), W.astype(np.float64), O, spec.stride, spec.pad_h, spec.pad_w)
    return O.astype(out_dtype)


def conv_backward_naive(spec: ConvLayerSpec, dO: np.ndarray, W: np.ndarray) -> np.ndarray:
    _check(dO, spec.output_shape(), "dO")
    _check(W, spec.weight_shape(), "W")
    out_dtype = _float_out_dtype(dO, W)
    dI = np.zeros(spec.input_shape(), dtype=np.float64)
    _naive_bwd(dO.astype(np.float64), W.astype(np.float64), dI, spec.stride, spec.pad_h, spec.pad_w)
    return dI.astype(out_dtype)


def conv_update_naive(spec: ConvLayerSpec, I: np.ndarray, dO: np.ndarray) -> np.ndarray:
    _check(I, spec.input_shape(), "I")
    _check(dO, spec.output_shape(), "dO")
    out_dtype = _float_out_dtype(I, dO)
    dW = np.zeros(spec.weight_shape(), dtype=np.float64)
    _naive_upd(I.astype(np.float64), dO.astype(np.float64), dW, spec.stride, spec.pad_h, spec.pad_w)
    return dW.astype(out_dtype)


def int_conv_forward_oracle(spec: ConvLayerSpec, I: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Exact integer convolution with 64-bit accumulation."""
    _check(I, spec.input_shape(), "I")
    _check(W, spec.weight_shape(), "W")
    if not (np.issubdtype(I.dtype, np.integer) and np.issubdtype(W.dtype, np.integer)):
        raise TypeError("integer oracle needs integer tensors")
    O = np.zeros(spec.output_shape(), dtype=np.int64)
    _naive_fwd(I.astype(np.int64), W.astype(np.int64), O, spec.stride, spec.pad_h, spec.pad_w)
    return O


def count_macs(spec: ConvLayerSpec) -> int:
    """Number of multiply-accumulate loop-body executions of the naive nest."""
    return int(_count_loop_body(spec.N, spec.K, spec.C, spec.P, spec.Q, spec.R, spec.S))


@njit(cache=True, nogil=True)
def _im2col_image(I, n, buf, stride, ph, pw, R, S, P, Q):
    C, H, Wd = I.shape[1], I.shape[2], I.shape[3]
    for c in range(C):
        for r in range(R):
            for s in range(S):
                row = (c * R + r) * S + s
                for oj in range(P):
                    y = stride * oj - ph + r
                    for oi in range(Q):
                        x = stride * oi - pw + s
                        if y < 0 or y >= H or x < 0 or x >= Wd:
                            buf[row, oj * Q + oi] = 0.0
                        else:
                            buf[row, oj * Q + oi] = I[n, c, y, x]


@njit(cache=True, nogil=True)
def _gemm(A, B, Cm):
    M, Kd = A.shape
    Nd = B.shape[1]
    for i in range(M):
        for j in range(Nd):
            acc = np.float32(0.0)
            for k in range(Kd):
                acc += A[i, k] * B[k, j]
            Cm[i, j] = acc


def im2col_buffer(spec: ConvLayerSpec, I: np.ndarray, n: int = 0) -> np.ndarray:
    """(C*R*S) x (P*Q) matrix of flattened receptive fields for image ``n``."""
    _check(I, spec.input_shape(), "I")
    buf = np.empty((spec.C * spec.R * spec.S, spec.P * spec.Q), dtype=np.float32)
    _im2col_image(I.astype(np.float32, copy=False), n, buf, spec.stride, spec.pad_h, spec.pad_w,
                  spec.R, spec.S, spec.P, spec.Q)
    return buf


def conv_forward_im2col(spec: ConvLayerSpec, I: np.ndarray, W: np.ndarray) -> np.ndarray:
    _check(I, spec.input_shape(), "I")
    _check(W, spec.weight_shape(), "W")
    I32 = I.astype(np.float32, copy=False)
    Wm = np.ascontiguousarray(W.astype(np.float32, copy=False).reshape(spec.K, -1))
    O = np.empty(spec.output_shape(), dtype=np.float32)
    buf = np.empty((spec.C * spec.R * spec.S, spec.P * spec.Q), dtype=np.float32)
    res = np.empty((spec.K, spec.P * spec.Q), dtype=np.float32)
    for n in range(spec.N):
        _im2col_image(I32, n, buf, spec.stride, spec.pad_h, spec.pad_w, spec.R, spec.S, spec.P, spec.Q)
        _gemm(Wm, buf, res)
        O[n] = res.reshape(spec.K, spec.P, spec.Q)
    return O
