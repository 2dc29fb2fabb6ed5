"""Dryrun / replay execution plans for the forward convolution.

The dryrun walks each thread's loop nest once at layer setup and records
every kernel call as a variant id plus input/weight/output offsets. Fused
operator calls are recorded as APPLY events. The resulting call trace is
run-length encoded into segments (CONV_STREAK runs and APPLY markers), and
replay simply executes the segments. Prefetch offsets of call ``i`` are the
compute offsets of call ``i + d``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import EmptyTrace, PlanInfeasible, PlanTensorMismatch
from .microkernel import (
    F32, I16, CompiledKernel, MicrokernelDescriptor, RegisterBlocking, build_kernel,
    forward_descriptors, select_register_blocking,
)
from .planner import LoopOrder, ThreadPartition, choose_loop_order, partition_threads
from .tensors import BlockedActivation, BlockedWeight, ConvLayerSpec

PLAN_FORMAT_VERSION = 1

CONV = "CONV"
CONV_STREAK = "CONV_STREAK"
APPLY = "APPLY"

FUSED_KINDS = {"RELU": _kernels.RELU, "BIAS_ADD": _kernels.BIAS_ADD, "BIAS_RELU": _kernels.BIAS_RELU}


@dataclass(frozen=True)
class FusedOp:
    """Elementwise operator applied to an output tile right after its last c_b accumulation."""

    kind: str
    bias: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in FUSED_KINDS:
            raise ValueError(f"unknown fused op {self.kind!r}")
        if self.kind != "RELU" and self.bias is None:
            raise ValueError(f"{self.kind} needs a bias vector")

    @property
    def op_id(self) -> int:
        return FUSED_KINDS[self.kind]

    def check(self, K: int) -> None:
        if self.bias is not None and np.asarray(self.bias).shape != (K,):
            raise ValueError(f"bias length {np.asarray(self.bias).shape} != K={K}")

    def apply(self, x: np.ndarray, axis: int = 1) -> np.ndarray:
        """Reference (unfused) application on a whole canonical tensor."""
        y = x
        if self.bias is not None:
            shape = [1] * x.ndim
            shape[axis] = -1
            y = y + np.asarray(self.bias, dtype=x.dtype).reshape(shape)
        if self.kind in ("RELU", "BIAS_RELU"):
            y = np.maximum(y, x.dtype.type(0))
        return y

    def apply_blocked(self, b: BlockedActivation) -> BlockedActivation:
        """Reference application on a blocked tensor (tail lanes stay zero)."""
        data = b.data.copy()
        if self.bias is not None:
            v = b.vlen
            padded = np.zeros(b.blocks * v, dtype=data.dtype)
            padded[:b.channels] = np.asarray(self.bias, dtype=data.dtype)
            data = data + padded.reshape(1, b.blocks, 1, 1, v)
        if self.kind in ("RELU", "BIAS_RELU"):
            data = np.maximum(data, data.dtype.type(0))
        return BlockedActivation(data, b.channels, b.pad_h, b.pad_w, b.scale)


@dataclass(frozen=True)
class ApplyInfo:
    """Argument record of one APPLY call: which op, where, and the tile extent."""

    op_id: int
    out_offset: int
    rows: int
    cols: int
    k0: int


@dataclass(frozen=True)
class Segment:
    type: str
    info: object  # streak length for CONV_STREAK, ApplyInfo (or None) for APPLY

    def __post_init__(self):
        if self.type == CONV_STREAK and (not isinstance(self.info, (int, np.integer)) or self.info < 1):
            raise ValueError("CONV_STREAK needs a positive length")
        if self.type not in (CONV_STREAK, APPLY):
            raise ValueError(f"unknown segment type {self.type!r}")


def encode_segments(trace) -> list[Segment]:
    """Maximal-run RLE of a call trace.

    ``trace`` items are the string ``"CONV"`` for a convolution call and
    anything else (an :class:`ApplyInfo` or ``"APPLY"``) for a fused call.
    """
    trace = list(trace)
    if not trace:
        raise EmptyTrace("cannot encode an empty trace")
    segments = []
    run = 0
    for item in trace:
        if isinstance(item, str) and item == CONV:
            run += 1
            continue
        if run:
            segments.append(Segment(CONV_STREAK, run))
            run = 0
        segments.append(Segment(APPLY, None if item == APPLY else item))
    if run:
        segments.append(Segment(CONV_STREAK, run))
    return segments


def decode_segments(segments: list[Segment]) -> list:
    out = []
    for seg in segments:
        if seg.type == CONV_STREAK:
            out.extend([CONV] * int(seg.info))
        else:
            out.append(APPLY if seg.info is None else seg.info)
    return out


@dataclass
class StreamBuffers:
    """Per-thread recorded streams; offsets are element indices into flat tensors."""

    var: np.ndarray
    inp: np.ndarray
    wt: np.ndarray
    out: np.ndarray
    pf_inp: np.ndarray
    pf_wt: np.ndarray
    pf_out: np.ndarray
    ap_op: np.ndarray
    ap_out: np.ndarray
    ap_rows: np.ndarray
    ap_cols: np.ndarray
    ap_k0: np.ndarray

    @property
    def n_calls(self) -> int:
        return int(self.var.shape[0])

    def apply_info(self, a: int) -> ApplyInfo:
        return ApplyInfo(int(self.ap_op[a]), int(self.ap_out[a]), int(self.ap_rows[a]),
                         int(self.ap_cols[a]), int(self.ap_k0[a]))


@dataclass
class ThreadPlan:
    segments: list[Segment]
    streams: StreamBuffers
    seg_type: np.ndarray
    seg_info: np.ndarray

    def trace(self) -> list:
        return decode_segments(self.segments)


@dataclass(frozen=True)
class OutputGeometry:
    """Output buffer layout: [N][K_b][height][width][vlen], pixels spaced by ``step``."""

    height: int
    width: int
    step: int = 1


@dataclass
class ExecutionPlan:
    spec: ConvLayerSpec
    dtype: str
    order: LoopOrder
    blocking: RegisterBlocking
    partition: ThreadPartition
    descriptors: list[MicrokernelDescriptor]
    kernels: list[CompiledKernel]
    var_rb: np.ndarray
    threads: list[ThreadPlan]
    out_geometry: OutputGeometry
    prefetch_distance: int = 1
    prefetch: bool = True
    fusion: FusedOp | None = None
    chain_limit: int = 512

    @property
    def T(self) -> int:
        return len(self.threads)

    @property
    def vlen(self) -> int:
        return self.spec.vlen

    @property
    def in_row(self) -> int:
        return self.spec.W_p * self.spec.vlen

    @property
    def out_row(self) -> int:
        g = self.out_geometry
        return g.width * self.spec.vlen * g.step

    @property
    def out_col(self) -> int:
        return self.spec.vlen * self.out_geometry.step

    def input_shape(self) -> tuple:
        s = self.spec
        return (s.N, s.C_b, s.H_p, s.W_p, s.vlen)

    def weight_shape(self) -> tuple:
        s = self.spec
        return (s.K_b, s.C_b, s.R, s.S, s.vlen, s.vlen)

    def output_shape(self) -> tuple:
        s, g = self.spec, self.out_geometry
        return (s.N, s.K_b, g.height, g.width, s.vlen)

    def bias_buffer(self) -> np.ndarray:
        dt = np.int32 if self.dtype == I16 else np.float32
        buf = np.zeros(self.spec.K_b * self.spec.vlen, dtype=dt)
        if self.fusion is not None and self.fusion.bias is not None:
            buf[:self.spec.K] = np.asarray(self.fusion.bias).astype(dt)
        return buf

    def n_calls(self) -> int:
        return sum(t.streams.n_calls for t in self.threads)


def _tile_tables(spec: ConvLayerSpec, blocking: RegisterBlocking):
    rows = blocking.row_tiles(spec.P)
    cols = blocking.col_tiles(spec.Q)
    variants = blocking.variants()
    var_of = np.empty((len(rows), len(cols)), dtype=np.int64)
    for a, (_, h) in enumerate(rows):
        for b, (_, w) in enumerate(cols):
            var_of[a, b] = variants.index((h, w))
    oj0 = np.array([r[0] for r in rows], dtype=np.int64)
    oi0 = np.array([c[0] for c in cols], dtype=np.int64)
    rsz = np.array([r[1] for r in rows], dtype=np.int64)
    csz = np.array([c[1] for c in cols], dtype=np.int64)
    return oj0, oi0, rsz, csz, var_of


def _chain(off: np.ndarray, d: int) -> np.ndarray:
    n = off.shape[0]
    idx = np.arange(n) + d
    idx = np.where(idx < n, idx, np.arange(n))
    return off[idx] if n else off.copy()


def dryrun_forward(spec: ConvLayerSpec, order: LoopOrder | None = None, blocking: RegisterBlocking | None = None,
                   partition: ThreadPartition | None = None, fusion: FusedOp | None = None,
                   config: EngineConfig = DEFAULT_CONFIG, dtype: str = F32,
                   out_geometry: OutputGeometry | None = None, threads: int | None = None) -> ExecutionPlan:
    """Record each thread's kernel-call stream for a forward pass.

    Nothing is computed; the loop nest in ``order`` is walked once and every
    microkernel call and APPLY is written to the thread's stream buffers.
    """
    order = order or choose_loop_order(spec)
    blocking = blocking or select_register_blocking(spec, config)
    partition = partition or partition_threads(spec, threads or config.threads, blocking)
    out_geometry = out_geometry or OutputGeometry(spec.P, spec.Q, 1)
    if fusion is not None:
        fusion.check(spec.K)
    if partition.dims != (spec.N, spec.K_b, len(blocking.row_tiles(spec.P)), len(blocking.col_tiles(spec.Q))):
        raise PlanInfeasible("partition was built for a different blocking or layer")
    if out_geometry.height < (spec.P - 1) * out_geometry.step + 1 or out_geometry.width < (spec.Q - 1) * out_geometry.step + 1:
        raise PlanInfeasible("output geometry too small for P x Q")

    descs = forward_descriptors(spec, blocking, config, dtype, out_width=out_geometry.width, out_step=out_geometry.step)
    kernels = [build_kernel(d) for d in descs]
    var_rb = np.array([[d.rb_p, d.rb_q] for d in descs], dtype=np.int64)

    v = spec.vlen
    oj0, oi0, rsz, csz, var_of = _tile_tables(spec, blocking)
    in_row = spec.W_p * v
    in_blk = spec.H_p * in_row
    in_img = spec.C_b * in_blk
    out_col = v * out_geometry.step
    out_row = out_geometry.width * v * out_geometry.step
    out_blk = out_geometry.height * out_geometry.width * v
    out_img = spec.K_b * out_blk
    w_blk = spec.R * spec.S * v * v

    extents = {"n": spec.N, "k_b": spec.K_b, "c_b": spec.C_b, "ojb": len(oj0), "oib": len(oi0)}
    shape = [extents[s] for s in order.loops]
    grid = np.indices(shape).reshape(len(shape), -1)
    idx = {sym: grid[i] for i, sym in enumerate(order.loops)}
    n, kb, cb, ojb, oib = idx["n"], idx["k_b"], idx["c_b"], idx["ojb"], idx["oib"]
    owner = partition.owner_array()[n, kb, ojb, oib]

    all_inp = n * in_img + cb * in_blk + spec.stride * oj0[ojb] * in_row + spec.stride * oi0[oib] * v
    all_wt = (kb * spec.C_b + cb) * w_blk
    all_out = n * out_img + kb * out_blk + oj0[ojb] * out_row + oi0[oib] * out_col
    all_var = var_of[ojb, oib]
    is_last_cb = cb == spec.C_b - 1

    d = config.prefetch_distance
    thread_plans = []
    for t in range(partition.T):
        sel = np.nonzero(owner == t)[0]
        if sel.size == 0:
            raise PlanInfeasible(f"thread {t} has no work items (T={partition.T})")
        inp, wt, out = all_inp[sel], all_wt[sel], all_out[sel]
        if fusion is not None:
            ap_pos = np.nonzero(is_last_cb[sel])[0]
            ap_sel = sel[ap_pos]
            ap = dict(
                ap_op=np.full(ap_pos.size, fusion.op_id, dtype=np.int64),
                ap_out=all_out[ap_sel],
                ap_rows=rsz[ojb[ap_sel]],
                ap_cols=csz[oib[ap_sel]],
                ap_k0=kb[ap_sel] * v,
            )
        else:
            ap_pos = np.zeros(0, dtype=np.int64)
            ap = {k: np.zeros(0, dtype=np.int64) for k in ("ap_op", "ap_out", "ap_rows", "ap_cols", "ap_k0")}
        streams = StreamBuffers(
            var=all_var[sel].copy(), inp=inp, wt=wt, out=out,
            pf_inp=_chain(inp, d), pf_wt=_chain(wt, d), pf_out=_chain(out, d), **ap,
        )
        segments = []
        prev = 0
        for a, pos in enumerate(ap_pos):
            run = int(pos) + 1 - prev
            if run:
                segments.append(Segment(CONV_STREAK, run))
            segments.append(Segment(APPLY, streams.apply_info(a)))
            prev = int(pos) + 1
        if prev < sel.size:
            segments.append(Segment(CONV_STREAK, int(sel.size - prev)))
        thread_plans.append(_thread_plan(segments, streams))

    return ExecutionPlan(
        spec=spec, dtype=dtype, order=order, blocking=blocking, partition=partition,
        descriptors=descs, kernels=kernels, var_rb=var_rb, threads=thread_plans,
        out_geometry=out_geometry, prefetch_distance=d, prefetch=config.prefetch,
        fusion=fusion, chain_limit=config.acc_chain_limit,
    )


def _thread_plan(segments: list[Segment], streams: StreamBuffers) -> ThreadPlan:
    seg_type = np.empty(len(segments), dtype=np.int64)
    seg_info = np.empty(len(segments), dtype=np.int64)
    a = 0
    for i, seg in enumerate(segments):
        if seg.type == CONV_STREAK:
            seg_type[i], seg_info[i] = _kernels.CONV_STREAK, seg.info
        else:
            seg_type[i], seg_info[i] = _kernels.APPLY, a
            a += 1
    return ThreadPlan(segments, streams, seg_type, seg_info)


def _flat_operands(plan: ExecutionPlan, I, W, O):
    arrays = []
    for obj, shape, name in ((I, plan.input_shape(), "input"), (W, plan.weight_shape(), "weight"),
                             (O, plan.output_shape(), "output")):
        data = obj.data if isinstance(obj, (BlockedActivation, BlockedWeight)) else obj
        if tuple(data.shape) != tuple(shape):
            raise PlanTensorMismatch(f"{name} shape {tuple(data.shape)} != plan {tuple(shape)}")
        if not data.flags.c_contiguous:
            raise PlanTensorMismatch(f"{name} buffer must be C-contiguous")
        arrays.append(data.reshape(-1))
    want_in = np.int16 if plan.dtype == I16 else np.float32
    want_out = np.int32 if plan.dtype == I16 else np.float32
    if arrays[0].dtype != want_in or arrays[1].dtype != want_in or arrays[2].dtype != want_out:
        raise PlanTensorMismatch(
            f"dtypes ({arrays[0].dtype}, {arrays[1].dtype}, {arrays[2].dtype}) do not match a {plan.dtype} plan")
    if isinstance(I, BlockedActivation) and (I.pad_h, I.pad_w) != (plan.spec.pad_h, plan.spec.pad_w):
        raise PlanTensorMismatch("input halo does not match the layer padding")
    return arrays


def replay(plan: ExecutionPlan, I, W, O, thread_id: int, _flat=None) -> int:
    """Execute one thread's segments; returns the number of kernel calls made."""
    I_f, W_f, O_f = _flat or _flat_operands(plan, I, W, O)
    tp = plan.threads[thread_id]
    st = tp.streams
    s = plan.spec
    bias = plan.bias_buffer()
    max_tile = int(np.max(plan.var_rb[:, 0] * plan.var_rb[:, 1])) * s.vlen
    if plan.dtype == I16:
        acc = np.zeros(max_tile, dtype=np.int32)
        chain = np.zeros(max_tile, dtype=np.int32)
        return _kernels.replay_i16(
            tp.seg_type, tp.seg_info, st.var, st.inp, st.wt, st.out, st.pf_inp, st.pf_wt, st.pf_out, plan.var_rb,
            st.ap_op, st.ap_out, st.ap_k0, st.ap_rows, st.ap_cols, I_f, W_f, O_f, bias, acc, chain,
            plan.prefetch, s.R, s.S, s.stride, s.vlen, plan.in_row, plan.out_row, plan.out_col, plan.chain_limit)
    acc = np.zeros(max_tile, dtype=np.float32)
    return _kernels.replay_f32(
        tp.seg_type, tp.seg_info, st.var, st.inp, st.wt, st.out, st.pf_inp, st.pf_wt, st.pf_out, plan.var_rb,
        st.ap_op, st.ap_out, st.ap_k0, st.ap_rows, st.ap_cols, I_f, W_f, O_f, bias, acc,
        plan.prefetch, s.R, s.S, s.stride, s.vlen, plan.in_row, plan.out_row, plan.out_col)


def replay_all(plan: ExecutionPlan, I, W, O) -> None:
    """Run every thread slot; slots own disjoint output tiles, joined at the end."""
    flat = _flat_operands(plan, I, W, O)
    if plan.T == 1:
        replay(plan, I, W, O, 0, flat)
        return
    with ThreadPoolExecutor(max_workers=plan.T) as pool:
        list(pool.map(lambda t: replay(plan, I, W, O, t, flat), range(plan.T)))


def execute_loop_nest(plan: ExecutionPlan, I, W, O) -> None:
    """Run the same layer by walking the loop nest directly, without recorded streams.

    Each thread slot iterates the full loop order, skips items it does not
    own, calls the kernel variant for the tile and applies the fused op
    after the last input-channel block. Used to cross-check replay.
    """
    I_f, W_f, O_f = _flat_operands(plan, I, W, O)
    s = plan.spec
    v = s.vlen
    rows = plan.blocking.row_tiles(s.P)
    cols = plan.blocking.col_tiles(s.Q)
    variants = plan.blocking.variants()
    owner = plan.partition.owner_array()
    in_row = s.W_p * v
    in_blk = s.H_p * in_row
    g = plan.out_geometry
    out_blk = g.height * g.width * v
    bias = plan.bias_buffer()
    extents = {"n": s.N, "k_b": s.K_b, "c_b": s.C_b, "ojb": len(rows), "oib": len(cols)}
    loops = plan.order.loops
    scratch = [k.scratch() for k in plan.kernels]
    for t in range(plan.T):
        for point in np.ndindex(*[extents[x] for x in loops]):
            at = dict(zip(loops, point))
            n, kb, cb, ojb, oib = at["n"], at["k_b"], at["c_b"], at["ojb"], at["oib"]
            if owner[n, kb, ojb, oib] != t:
                continue
            oj, h = rows[ojb]
            oi, w = cols[oib]
            var = variants.index((h, w))
            i_off = (n * s.C_b + cb) * in_blk + s.stride * oj * in_row + s.stride * oi * v
            w_off = (kb * s.C_b + cb) * s.R * s.S * v * v
            o_off = (n * s.K_b + kb) * out_blk + oj * plan.out_row + oi * plan.out_col
            plan.kernels[var](I_f, i_off, W_f, w_off, O_f, o_off, i_off, w_off, o_off, scratch=scratch[var])
            if plan.fusion is not None and cb == s.C_b - 1:
                _kernels.apply_tile(plan.fusion.op_id, O_f, o_off, bias, kb * v, h, w, v,
                                    plan.out_row, plan.out_col)


def validate_plan(plan: ExecutionPlan, spec: ConvLayerSpec | None = None) -> list[str]:
    """Check a plan's structural invariants and return human-readable violations.

    Covers stream lengths, segment well-formedness, offset bounds and
    decodability, thread ownership, coverage of every (n, k_b, c_b, tile)
    exactly once, prefetch chaining and APPLY placement.
    """
    s = spec or plan.spec
    problems: list[str] = []
    if spec is not None and spec != plan.spec:
        problems.append("plan was built for a different layer spec")
    v = s.vlen
    rows = plan.blocking.row_tiles(s.P)
    cols = plan.blocking.col_tiles(s.Q)
    row_start = {start: i for i, (start, _) in enumerate(rows)}
    col_start = {start: i for i, (start, _) in enumerate(cols)}
    variants = plan.blocking.variants()
    owner = plan.partition.owner_array()
    g = plan.out_geometry
    in_row = s.W_p * v
    in_blk = s.H_p * in_row
    in_size = s.N * s.C_b * in_blk
    w_blk = s.R * s.S * v * v
    w_size = s.K_b * s.C_b * w_blk
    out_blk = g.height * g.width * v
    out_size = s.N * s.K_b * out_blk
    n_tiles = len(rows) * len(cols)
    seen = np.zeros(s.N * s.K_b * s.C_b * n_tiles, dtype=np.int64)
    d = plan.prefetch_distance

    for t, tp in enumerate(plan.threads):
        st = tp.streams
        n_calls = st.n_calls
        lengths = {len(x) for x in (st.var, st.inp, st.wt, st.out, st.pf_inp, st.pf_wt, st.pf_out)}
        if len(lengths) != 1:
            problems.append(f"thread {t}: stream lengths differ {sorted(lengths)}")
            continue
        streak_total = 0
        prev_type = None
        n_apply = 0
        for i, seg in enumerate(tp.segments):
            if seg.type == CONV_STREAK:
                if seg.info < 1:
                    problems.append(f"thread {t}: segment {i} has empty streak")
                if prev_type == CONV_STREAK:
                    problems.append(f"thread {t}: segment {i} adjacent CONV_STREAKs (not maximal)")
                streak_total += int(seg.info)
            else:
                n_apply += 1
            prev_type = seg.type
        if streak_total != n_calls:
            problems.append(f"thread {t}: streaks cover {streak_total} calls, streams hold {n_calls}")
        if n_apply != len(st.ap_op):
            problems.append(f"thread {t}: {n_apply} APPLY segments but {len(st.ap_op)} apply records")

        var, inp, wt, out = st.var, st.inp, st.wt, st.out
        bad_var = (var < 0) | (var >= len(variants))
        if bad_var.any():
            problems.append(f"thread {t}: {int(bad_var.sum())} calls with unknown kernel variant")
            continue
        # decode output offsets
        n_idx, rem = np.divmod(out, s.K_b * out_blk)
        kb_idx, rem = np.divmod(rem, out_blk)
        oy, rem = np.divmod(rem, g.width * v)
        ox, lane = np.divmod(rem, v)
        ok = (out >= 0) & (out < out_size) & (lane == 0) & (oy % g.step == 0) & (ox % g.step == 0)
        oj, oi = oy // g.step, ox // g.step
        ojb = np.array([row_start.get(int(x), -1) for x in oj], dtype=np.int64)
        oib = np.array([col_start.get(int(x), -1) for x in oi], dtype=np.int64)
        ok &= (ojb >= 0) & (oib >= 0)
        if not ok.all():
            problems.append(f"thread {t}: {int((~ok).sum())} output offsets do not address a tile origin")
        # decode weight offsets
        wblock, wrem = np.divmod(wt, w_blk)
        kb_w, cb_w = np.divmod(wblock, s.C_b)
        okw = (wt >= 0) & (wt < w_size) & (wrem == 0) & (kb_w == kb_idx)
        if not okw.all():
            problems.append(f"thread {t}: {int((~okw).sum())} weight offsets inconsistent with output block")
        # decode input offsets
        iblock, irem = np.divmod(inp, in_blk)
        n_in, cb_in = np.divmod(iblock, s.C_b)
        iy, irem2 = np.divmod(irem, in_row)
        ix, ilane = np.divmod(irem2, v)
        oki = ((inp >= 0) & (inp < in_size) & (ilane == 0) & (n_in == n_idx) & (cb_in == cb_w)
               & (iy == s.stride * oj) & (ix == s.stride * oi))
        if not oki.all():
            problems.append(f"thread {t}: {int((~oki).sum())} input offsets inconsistent with output tile")
        good = ok & okw & oki
        if good.any():
            sel = np.nonzero(good)[0]
            tile_shapes = [(rows[a][1], cols[b][1]) for a, b in zip(ojb[sel], oib[sel])]
            wrong_var = [i for i, shp, vv in zip(sel, tile_shapes, var[sel]) if variants[vv] != shp]
            if wrong_var:
                problems.append(f"thread {t}: {len(wrong_var)} calls use a kernel variant of the wrong shape")
            owners = owner[n_idx[sel], kb_idx[sel], ojb[sel], oib[sel]]
            if np.any(owners != t):
                problems.append(f"thread {t}: {int(np.sum(owners != t))} calls write tiles owned by another thread")
            lin = (((n_idx[sel] * s.K_b + kb_idx[sel]) * s.C_b + cb_w[sel]) * len(rows) + ojb[sel]) * len(cols) + oib[sel]
            np.add.at(seen, lin, 1)
        # prefetch chaining
        for name, comp, pf in (("input", inp, st.pf_inp), ("weight", wt, st.pf_wt), ("output", out, st.pf_out)):
            expect = _chain(comp, d)
            if not np.array_equal(pf, expect):
                bad = int(np.sum(pf != expect))
                problems.append(f"thread {t}: {bad} {name} prefetch offsets break chaining to call i+{d}")
        # APPLY placement
        if plan.fusion is not None:
            pos = 0
            for seg in tp.segments:
                if seg.type == CONV_STREAK:
                    pos += int(seg.info)
                    continue
                info = seg.info
                if pos == 0 or info is None:
                    problems.append(f"thread {t}: APPLY before any convolution")
                    continue
                last = pos - 1
                if out[last] != info.out_offset:
                    problems.append(f"thread {t}: APPLY at call {last} targets a different tile")
                elif good[last] and cb_w[last] != s.C_b - 1:
                    problems.append(f"thread {t}: APPLY on a partially accumulated tile (call {last})")
        elif len(st.ap_op):
            problems.append(f"thread {t}: APPLY records in a plan without fusion")

    missing = int(np.sum(seen == 0))
    dup = int(np.sum(seen > 1))
    if missing or dup:
        problems.append(f"coverage: {missing} (n,k_b,c_b,tile) tuples never executed, {dup} executed more than once")
    if plan.fusion is not None:
        n_apply_total = sum(len(tp.streams.ap_op) for tp in plan.threads)
        if n_apply_total != s.N * s.K_b * n_tiles:
            problems.append(f"fusion: {n_apply_total} APPLY calls for {s.N * s.K_b * n_tiles} output tiles")
    return problems


# -- serialization ---------------------------------------------------------

_STREAM_FIELDS = ("var", "inp", "wt", "out", "pf_inp", "pf_wt", "pf_out",
                  "ap_op", "ap_out", "ap_rows", "ap_cols", "ap_k0")


def plan_to_dict(plan: ExecutionPlan) -> dict:
    s = plan.spec
    threads = []
    for tp in plan.threads:
        threads.append({
            "segments": [[seg.type, int(seg.info) if seg.type == CONV_STREAK else None] for seg in tp.segments],
            **{f: getattr(tp.streams, f).tolist() for f in _STREAM_FIELDS},
        })
    return {
        "version": PLAN_FORMAT_VERSION,
        "spec": {k: getattr(s, k) for k in ("N", "C", "K", "H", "W", "R", "S", "stride", "pad_h", "pad_w", "vlen", "layer_id")},
        "dtype": plan.dtype,
        "order": list(plan.order.loops),
        "blocking": asdict(plan.blocking),
        "partition": {"T": plan.partition.T, "dims": list(plan.partition.dims), "level": plan.partition.level,
                      "ranges": [list(r) for r in plan.partition.ranges]},
        "descriptors": [asdict(d) for d in plan.descriptors],
        "out_geometry": asdict(plan.out_geometry),
        "prefetch_distance": plan.prefetch_distance,
        "prefetch": plan.prefetch,
        "chain_limit": plan.chain_limit,
        "fusion": None if plan.fusion is None else {
            "kind": plan.fusion.kind,
            "bias": None if plan.fusion.bias is None else np.asarray(plan.fusion.bias).tolist(),
        },
        "threads": threads,
    }


def plan_from_dict(data: dict) -> ExecutionPlan:
    if data.get("version") != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported plan format version {data.get('version')!r}")
    spec = ConvLayerSpec(**data["spec"])
    fusion = None
    if data["fusion"] is not None:
        bias = data["fusion"]["bias"]
        fusion = FusedOp(data["fusion"]["kind"], None if bias is None else np.asarray(bias))
    descs = [MicrokernelDescriptor(**d) for d in data["descriptors"]]
    threads = []
    for td in data["threads"]:
        streams = StreamBuffers(**{f: np.asarray(td[f], dtype=np.int64) for f in _STREAM_FIELDS})
        segments = []
        a = 0
        for kind, info in td["segments"]:
            if kind == CONV_STREAK:
                segments.append(Segment(CONV_STREAK, int(info)))
            else:
                segments.append(Segment(APPLY, streams.apply_info(a)))
                a += 1
        threads.append(_thread_plan(segments, streams))
    part = data["partition"]
    return ExecutionPlan(
        spec=spec, dtype=data["dtype"], order=LoopOrder(tuple(data["order"])),
        blocking=RegisterBlocking(**data["blocking"]),
        partition=ThreadPartition(part["T"], tuple(part["dims"]), part["level"], tuple(tuple(r) for r in part["ranges"])),
        descriptors=descs, kernels=[build_kernel(d) for d in descs],
        var_rb=np.array([[d.rb_p, d.rb_q] for d in descs], dtype=np.int64),
        threads=threads, out_geometry=OutputGeometry(**data["out_geometry"]),
        prefetch_distance=data["prefetch_distance"], prefetch=data["prefetch"],
        fusion=fusion, chain_limit=data["chain_limit"],
    )


def save_plan(plan: ExecutionPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan)))


def load_plan(path: str | Path) -> ExecutionPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def plan_summary(plan: ExecutionPlan) -> dict:
    return {
        "threads": plan.T,
        "calls": plan.n_calls(),
        "segments": sum(len(t.segments) for t in plan.threads),
        "variants": [tuple(int(x) for x in r) for r in plan.var_rb],
        "order": list(plan.order.loops),
        "blocking": [plan.blocking.rb_p, plan.blocking.rb_q],
        "calls_per_thread": [t.streams.n_calls for t in plan.threads],
        "work_items": math.prod(plan.partition.dims),
    }
