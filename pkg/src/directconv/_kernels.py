"""Numba kernels operating on flat tensor buffers plus element offsets.

Every kernel receives the base array and an offset, the same convention the
recorded streams use. Accumulation order inside a kernel is fixed
(r, s, c ascending for forward; pixels in row-major order for update), which
makes every pass bitwise reproducible and independent of register blocking.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

CONV_STREAK = 0
APPLY = 1

RELU = 0
BIAS_ADD = 1
BIAS_RELU = 2


@intrinsic
def _prefetch(typingctx, arr, idx):
    """Issue an L2 read prefetch hint for ``arr[idx]``; no architectural effect."""
    if not isinstance(arr, types.Array) or not isinstance(idx, types.Integer):
        return None
    sig = types.void(arr, idx)

    def codegen(context, builder, signature, args):
        aryty, _ = signature.args
        ary = context.make_array(aryty)(context, builder, args[0])
        ptr = builder.gep(ary.data, [args[1]])
        i8p = ir.IntType(8).as_pointer()
        i32 = ir.IntType(32)
        fnty = ir.FunctionType(ir.VoidType(), [i8p, i32, i32, i32])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.prefetch.p0")
        builder.call(fn, [builder.bitcast(ptr, i8p), i32(0), i32(2), i32(1)])
        return context.get_dummy_value()

    return sig, codegen


@njit(inline="always")
def _hint(arr, off, enabled):
    if enabled and 0 <= off < arr.shape[0]:
        _prefetch(arr, off)


@njit(cache=True, nogil=True)
def conv_fwd_f32(inp, i_off, wt, w_off, out, o_off, pf_i, pf_w, pf_o, prefetch, acc,
                 rb_p, rb_q, R, S, stride, vlen, in_row, out_row, out_col):
    # future sub-tensors: hints only
    _hint(inp, pf_i, prefetch)
    _hint(wt, pf_w, prefetch)
    _hint(out, pf_o, prefetch)
    # hoisted load of the output tile
    for p in range(rb_p):
        for q in range(rb_q):
            ob = o_off + p * out_row + q * out_col
            ab = (p * rb_q + q) * vlen
            for k in range(vlen):
                acc[ab + k] = out[ob + k]
    for r in range(R):
        for s in range(S):
            for c in range(vlen):
                wb = w_off + ((r * S + s) * vlen + c) * vlen
                # rows of the pixel block share this weight row
                for p in range(rb_p):
                    ib = i_off + (stride * p + r) * in_row + s * vlen + c
                    for q in range(rb_q):
                        x = inp[ib + stride * q * vlen]
                        ab = (p * rb_q + q) * vlen
                        for k in range(vlen):
                            acc[ab + k] += x * wt[wb + k]
    for p in range(rb_p):
        for q in range(rb_q):
            ob = o_off + p * out_row + q * out_col
            ab = (p * rb_q + q) * vlen
            for k in range(vlen):
                out[ob + k] = acc[ab + k]


@njit(cache=True, nogil=True)
def conv_fwd_i16(inp, i_off, wt, w_off, out, o_off, pf_i, pf_w, pf_o, prefetch, acc, chain,
                 rb_p, rb_q, R, S, stride, vlen, in_row, out_row, out_col, chain_limit):
    _hint(inp, pf_i, prefetch)
    _hint(wt, pf_w, prefetch)
    _hint(out, pf_o, prefetch)
    tile = rb_p * rb_q * vlen
    for p in range(rb_p):
        for q in range(rb_q):
            ob = o_off + p * out_row + q * out_col
            ab = (p * rb_q + q) * vlen
            for k in range(vlen):
                acc[ab + k] = out[ob + k]
    for t in range(tile):
        chain[t] = 0
    used = 0
    for r in range(R):
        for s in range(S):
            for c in range(vlen):
                wb = w_off + ((r * S + s) * vlen + c) * vlen
                for p in range(rb_p):
                    ib = i_off + (stride * p + r) * in_row + s * vlen + c
                    for q in range(rb_q):
                        x = np.int32(inp[ib + stride * q * vlen])
                        ab = (p * rb_q + q) * vlen
                        for k in range(vlen):
                            chain[ab + k] += np.int32(x * np.int32(wt[wb + k]))
                used += 1
                if used == chain_limit:
                    for t in range(tile):
                        acc[t] += chain[t]
                        chain[t] = 0
                    used = 0
    for t in range(tile):
        acc[t] += chain[t]
    for p in range(rb_p):
        for q in range(rb_q):
            ob = o_off + p * out_row + q * out_col
            ab = (p * rb_q + q) * vlen
            for k in range(vlen):
                out[ob + k] = acc[ab + k]


@njit(cache=True, nogil=True)
def conv_upd_f32(inp, i_off, dout, o_off, dw, w_off, pf_i, pf_o, pf_w, prefetch, acc,
                 b_p, b_q, stride, vlen, in_row, out_row):
    """dW[c][k] += sum over a b_p x b_q pixel tile of I[.][.][c] * dO[.][.][k]."""
    _hint(inp, pf_i, prefetch)
    _hint(dout, pf_o, prefetch)
    _hint(dw, pf_w, prefetch)
    vv = vlen * vlen
    for t in range(vv):
        acc[t] = dw[w_off + t]
    for p in range(b_p):
        for q in range(b_q):
            ib = i_off + stride * p * in_row + stride * q * vlen
            ob = o_off + p * out_row + q * vlen
            for c in range(vlen):
                x = inp[ib + c]
                for k in range(vlen):
                    acc[c * vlen + k] += x * dout[ob + k]
    for t in range(vv):
        dw[w_off + t] = acc[t]


@njit(cache=True, nogil=True)
def apply_tile(op, out, o_off, bias, k0, rows, cols, vlen, out_row, out_col):
    for p in range(rows):
        for q in range(cols):
            ob = o_off + p * out_row + q * out_col
            for k in range(vlen):
                v = out[ob + k]
                if op == BIAS_ADD or op == BIAS_RELU:
                    v = v + bias[k0 + k]
                if op == RELU or op == BIAS_RELU:
                    if v < 0:
                        v = v - v
                out[ob + k] = v


@njit(cache=True, nogil=True)
def replay_f32(seg_type, seg_info, var, inp, wt, out, pf_inp, pf_wt, pf_out, var_rb,
               ap_op, ap_out, ap_k0, ap_rows, ap_cols,
               I, W, O, bias, acc, prefetch, R, S, stride, vlen, in_row, out_row, out_col):
    i = 0
    for pc in range(seg_type.shape[0]):
        if seg_type[pc] == CONV_STREAK:
            for _ in range(seg_info[pc]):
                v = var[i]
                conv_fwd_f32(I, inp[i], W, wt[i], O, out[i], pf_inp[i], pf_wt[i], pf_out[i], prefetch, acc,
                             var_rb[v, 0], var_rb[v, 1], R, S, stride, vlen, in_row, out_row, out_col)
                i += 1
        else:
            a = seg_info[pc]
            apply_tile(ap_op[a], O, ap_out[a], bias, ap_k0[a], ap_rows[a], ap_cols[a], vlen, out_row, out_col)
    return i


@njit(cache=True, nogil=True)
def replay_i16(seg_type, seg_info, var, inp, wt, out, pf_inp, pf_wt, pf_out, var_rb,
               ap_op, ap_out, ap_k0, ap_rows, ap_cols,
               I, W, O, bias, acc, chain, prefetch, R, S, stride, vlen, in_row, out_row, out_col, chain_limit):
    i = 0
    for pc in range(seg_type.shape[0]):
        if seg_type[pc] == CONV_STREAK:
            for _ in range(seg_info[pc]):
                v = var[i]
                conv_fwd_i16(I, inp[i], W, wt[i], O, out[i], pf_inp[i], pf_wt[i], pf_out[i], prefetch,
                             acc, chain, var_rb[v, 0], var_rb[v, 1], R, S, stride, vlen,
                             in_row, out_row, out_col, chain_limit)
                i += 1
        else:
            a = seg_info[pc]
            apply_tile(ap_op[a], O, ap_out[a], bias, ap_k0[a], ap_rows[a], ap_cols[a], vlen, out_row, out_col)
    return i


@njit(cache=True, nogil=True)
def update_worker(I, dO, dW, n0, n1, tasks, tiles, acc, prefetch,
                  Cb, Kb, R, S, stride, vlen, in_img, in_blk, in_row, out_img, out_blk, out_row):
    """Accumulate dW blocks for ``tasks`` (rows of k_b, c_b, r, s) over images [n0, n1)."""
    vv = vlen * vlen
    for n in range(n0, n1):
        for t in range(tasks.shape[0]):
            kb = tasks[t, 0]
            cb = tasks[t, 1]
            r = tasks[t, 2]
            s = tasks[t, 3]
            w_off = (((kb * Cb + cb) * R + r) * S + s) * vv
            for j in range(tiles.shape[0]):
                oj = tiles[j, 0]
                oi = tiles[j, 1]
                i_off = n * in_img + cb * in_blk + (stride * oj + r) * in_row + (stride * oi + s) * vlen
                o_off = n * out_img + kb * out_blk + oj * out_row + oi * vlen
                if j + 1 < tiles.shape[0]:
                    nj = j + 1
                else:
                    nj = j
                pf_i = n * in_img + cb * in_blk + (stride * tiles[nj, 0] + r) * in_row + (stride * tiles[nj, 1] + s) * vlen
                pf_o = n * out_img + kb * out_blk + tiles[nj, 0] * out_row + tiles[nj, 1] * vlen
                conv_upd_f32(I, i_off, dO, o_off, dW, w_off, pf_i, pf_o, w_off, prefetch, acc,
                             tiles[j, 2], tiles[j, 3], stride, vlen, in_row, out_row)


@njit(cache=True, nogil=True)
def small_gemm_bwd(wt, w_off, dout, o_off, din, i_off, n_pix, vlen, in_step):
    """C += A x B with A = W'[k][c] (vlen x vlen), B = one dO row, C = one strided dI row."""
    for q in range(n_pix):
        ob = o_off + q * vlen
        ib = i_off + q * in_step
        for k in range(vlen):
            x = dout[ob + k]
            wb = w_off + k * vlen
            for c in range(vlen):
                din[ib + c] += wt[wb + c] * x


@njit(cache=True, nogil=True)
def generic_bwd_worker(dO, Wt, dI, items, Kb, Cb, P, Q, R, S, stride, vlen,
                       do_img, do_blk, di_img, di_blk, di_row):
    """Generic input-gradient loop nest for (n, c_b) work items; Wt is the transformed weight."""
    vv = vlen * vlen
    for it in range(items.shape[0]):
        n = items[it, 0]
        cb = items[it, 1]
        for kb in range(Kb):
            for oj in range(P):
                ij = stride * oj
                for r in range(R):
                    for s in range(S):
                        w_off = (((cb * Kb + kb) * R + (R - 1 - r)) * S + (S - 1 - s)) * vv
                        o_off = n * do_img + kb * do_blk + oj * Q * vlen
                        i_off = n * di_img + cb * di_blk + (ij + r) * di_row + s * vlen
                        small_gemm_bwd(Wt, w_off, dO, o_off, dI, i_off, Q, vlen, stride * vlen)
