"""Forward, backward and weight-update drivers on blocked tensors."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import InfeasibleStrategy, ShapeMismatch
from .microkernel import F32, I16
from .planner import (
    WeightUpdateStrategy, _spec_key, _split_range, choose_spatial_blocking, choose_update_strategy,
)
from .streams import ExecutionPlan, FusedOp, OutputGeometry, dryrun_forward, replay_all
from .tensors import BlockedActivation, BlockedWeight, ConvLayerSpec

DUALITY_STRIDE1 = "DUALITY_STRIDE1"
DUALITY_1x1 = "DUALITY_1x1"
GENERIC_GEMM = "GENERIC_GEMM"


def _run_parallel(fn, T: int) -> None:
    if T == 1:
        fn(0)
        return
    with ThreadPoolExecutor(max_workers=T) as pool:
        list(pool.map(fn, range(T)))


def _dtype_name(arr: np.ndarray) -> str:
    return I16 if arr.dtype == np.int16 else F32


def make_forward_plan(spec: ConvLayerSpec, threads: int | None = None, fusion: FusedOp | None = None,
                      config: EngineConfig = DEFAULT_CONFIG, dtype: str = F32,
                      out_geometry: OutputGeometry | None = None) -> ExecutionPlan:
    return dryrun_forward(spec, fusion=fusion, config=config, dtype=dtype, out_geometry=out_geometry,
                          threads=threads or config.threads)


def forward(spec: ConvLayerSpec, I: BlockedActivation, W: BlockedWeight,
            plan: ExecutionPlan | None = None) -> BlockedActivation:
    """O = conv(I, W) (plus the plan's fused op) by replaying the plan's kernel streams."""
    if plan is None:
        plan = make_forward_plan(spec, dtype=_dtype_name(I.data))
    if plan.spec != spec:
        raise ShapeMismatch("plan was built for a different layer")
    out_dtype = np.int32 if plan.dtype == I16 else np.float32
    O = np.zeros(plan.output_shape(), dtype=out_dtype)
    replay_all(plan, I, W, O)
    return BlockedActivation(O, spec.K, 0, 0, I.scale * W.scale)


def transform_weight_stride1(W: BlockedWeight) -> BlockedWeight:
    """Dual weights for backward: swap channel roles, transpose lanes, flip R and S.

    W'[c_b][k_b][r][s][k][c] = W[k_b][c_b][R-1-r][S-1-s][c][k]
    """
    data = W.data[:, :, ::-1, ::-1, :, :].transpose(1, 0, 2, 3, 5, 4)
    return BlockedWeight(np.ascontiguousarray(data), W.in_channels, W.out_channels, W.scale)


def backward_route(spec: ConvLayerSpec) -> str:
    if spec.stride == 1 and spec.pad_h <= spec.R - 1 and spec.pad_w <= spec.S - 1:
        return DUALITY_STRIDE1
    if spec.R == 1 and spec.S == 1 and spec.pad_h == 0 and spec.pad_w == 0:
        return DUALITY_1x1
    return GENERIC_GEMM


def _dual_spec(spec: ConvLayerSpec, pad_h: int, pad_w: int) -> ConvLayerSpec:
    return ConvLayerSpec(N=spec.N, C=spec.K, K=spec.C, H=spec.P, W=spec.Q, R=spec.R, S=spec.S, stride=1,
                         pad_h=pad_h, pad_w=pad_w, vlen=spec.vlen)


def _check_grad_output(spec: ConvLayerSpec, dO: BlockedActivation) -> None:
    if (dO.N, dO.channels, dO.H, dO.W) != spec.output_shape() or dO.vlen != spec.vlen:
        raise ShapeMismatch(f"dO {(dO.N, dO.channels, dO.H, dO.W)} != {spec.output_shape()}")


def _check_weight(spec: ConvLayerSpec, W: BlockedWeight) -> None:
    if (W.out_channels, W.in_channels, W.R, W.S) != spec.weight_shape() or W.vlen != spec.vlen:
        raise ShapeMismatch(f"W {(W.out_channels, W.in_channels, W.R, W.S)} != {spec.weight_shape()}")


@dataclass
class BackwardPlan:
    """Setup-time state of a backward pass: the route and, for duality routes, the forward plan."""

    spec: ConvLayerSpec
    route: str
    dual: ConvLayerSpec | None = None
    plan: ExecutionPlan | None = None
    threads: int = 1


def prepare_backward(spec: ConvLayerSpec, threads: int = 1, config: EngineConfig = DEFAULT_CONFIG,
                     route: str | None = None, dtype: str = F32) -> BackwardPlan:
    route = route or backward_route(spec)
    if route == DUALITY_STRIDE1:
        if spec.stride != 1 or spec.pad_h > spec.R - 1 or spec.pad_w > spec.S - 1:
            raise ValueError("stride-1 duality needs stride == 1 and pad <= R-1, S-1")
        dual = _dual_spec(spec, spec.R - 1 - spec.pad_h, spec.S - 1 - spec.pad_w)
        plan = make_forward_plan(dual, threads, config=config, dtype=dtype)
        return BackwardPlan(spec, route, dual, plan, threads)
    if route == DUALITY_1x1:
        if spec.R != 1 or spec.S != 1 or spec.pad_h or spec.pad_w:
            raise ValueError("1x1 duality needs R = S = 1 and no padding")
        dual = _dual_spec(spec, 0, 0)
        plan = make_forward_plan(dual, threads, config=config, dtype=dtype,
                                 out_geometry=OutputGeometry(spec.H, spec.W, spec.stride))
        return BackwardPlan(spec, route, dual, plan, threads)
    if route != GENERIC_GEMM:
        raise ValueError(f"unknown backward route {route!r}")
    if dtype != F32:
        raise NotImplementedError("the generic backward route is f32 only")
    return BackwardPlan(spec, route, threads=threads)


def backward(spec: ConvLayerSpec, dO: BlockedActivation, W: BlockedWeight, threads: int = 1,
             config: EngineConfig = DEFAULT_CONFIG, route: str | None = None,
             prepared: BackwardPlan | None = None) -> BlockedActivation:
    """Input gradient dI, reusing the forward engine where the layer allows it.

    stride 1: forward convolution of dO (given an R-1-pad halo) with the dual weights.
    1x1, stride s: forward-style kernels over dO scattered onto the stride lattice of dI.
    otherwise: vlen x vlen x Q small GEMMs over (n, c_b, k_b, oj, r, s).
    """
    _check_grad_output(spec, dO)
    _check_weight(spec, W)
    bp = prepared or prepare_backward(spec, threads, config, route, _dtype_name(dO.data))
    if bp.spec != spec:
        raise ShapeMismatch("backward plan was built for a different layer")
    Wt = transform_weight_stride1(W)
    if bp.route == DUALITY_STRIDE1:
        dI = forward(bp.dual, dO.with_halo(bp.dual.pad_h, bp.dual.pad_w), Wt, bp.plan)
        return BlockedActivation(dI.data, spec.C, 0, 0, dI.scale)
    if bp.route == DUALITY_1x1:
        out_dtype = np.int32 if bp.plan.dtype == I16 else np.float32
        dI = np.zeros(bp.plan.output_shape(), dtype=out_dtype)
        replay_all(bp.plan, dO.with_halo(0, 0), Wt, dI)
        return BlockedActivation(dI, spec.C, 0, 0, dO.scale * W.scale)
    return _backward_generic(spec, dO.with_halo(0, 0), Wt, bp.threads)


def _backward_generic(spec: ConvLayerSpec, dO: BlockedActivation, Wt: BlockedWeight, threads: int) -> BlockedActivation:
    v = spec.vlen
    H_p, W_p = spec.H_p, spec.W_p
    dI = np.zeros((spec.N, spec.C_b, H_p, W_p, v), dtype=np.float32)
    items = np.array([(n, cb) for n in range(spec.N) for cb in range(spec.C_b)], dtype=np.int64)
    chunks = _split_range(len(items), threads)
    do_blk = spec.P * spec.Q * v
    di_row = W_p * v
    di_blk = H_p * di_row
    dO_f, Wt_f, dI_f = dO.data.reshape(-1), Wt.data.reshape(-1), dI.reshape(-1)

    def work(t):
        a, b = chunks[t]
        _kernels.generic_bwd_worker(dO_f, Wt_f, dI_f, items[a:b], spec.K_b, spec.C_b, spec.P, spec.Q,
                                    spec.R, spec.S, spec.stride, v, spec.K_b * do_blk, do_blk,
                                    spec.C_b * di_blk, di_blk, di_row)

    _run_parallel(work, threads)
    inner = np.ascontiguousarray(dI[:, :, spec.pad_h:spec.pad_h + spec.H, spec.pad_w:spec.pad_w + spec.W, :])
    return BlockedActivation(inner, spec.C, 0, 0, dO.scale * Wt.scale)


@dataclass
class WeightGradCopies:
    """G private dW accumulators and which copy each thread writes."""

    copies: list[np.ndarray]
    owner: list[int]

    @property
    def G(self) -> int:
        return len(self.copies)


def reduce_weight_copies(copies: WeightGradCopies | list[np.ndarray], threads: int = 1) -> np.ndarray:
    """Elementwise sum copy 0 + copy 1 + ... ; each thread reduces a disjoint slice."""
    arrays = copies.copies if isinstance(copies, WeightGradCopies) else list(copies)
    if not arrays:
        raise ValueError("nothing to reduce")
    shape = arrays[0].shape
    flats = [a.reshape(-1) for a in arrays]
    out = np.empty(flats[0].shape, dtype=flats[0].dtype)
    slices = _split_range(out.shape[0], threads)

    def work(t):
        a, b = slices[t]
        out[a:b] = flats[0][a:b]
        for f in flats[1:]:
            out[a:b] += f[a:b]

    _run_parallel(work, threads)
    return out.reshape(shape)


def weight_update(spec: ConvLayerSpec, I: BlockedActivation, dO: BlockedActivation,
                  strategy: WeightUpdateStrategy | None = None, blocking: tuple[int, int] | None = None,
                  threads: int | None = None, config: EngineConfig = DEFAULT_CONFIG) -> BlockedWeight:
    """dW by the chosen parallelization strategy.

    Threads accumulate (k_b, c_b, r, s) blocks over their minibatch shard into
    one of G gradient copies; with G > 1 the copies are then summed in a
    fixed order.
    """
    if (I.N, I.channels, I.H, I.W) != spec.input_shape() or I.vlen != spec.vlen:
        raise ShapeMismatch(f"I {(I.N, I.channels, I.H, I.W)} != {spec.input_shape()}")
    _check_grad_output(spec, dO)
    if I.dtype != np.float32 or dO.dtype != np.float32:
        raise NotImplementedError("weight update is f32 only")
    T = threads or (strategy.threads if strategy is not None else config.threads)
    strategy = strategy or choose_update_strategy(spec, T)
    if strategy.spec_key != _spec_key(spec):
        raise InfeasibleStrategy("strategy was built for a different layer")
    if strategy.threads != T:
        raise InfeasibleStrategy(f"strategy is for T={strategy.threads}, asked to run with T={T}")
    b_p, b_q = blocking or choose_spatial_blocking(spec, config=config)
    if spec.P % b_p or spec.Q % b_q:
        raise ShapeMismatch(f"spatial block ({b_p}, {b_q}) must divide ({spec.P}, {spec.Q})")

    I = I.with_halo(spec.pad_h, spec.pad_w)
    dO = dO.with_halo(0, 0)
    v = spec.vlen
    shape = (spec.K_b, spec.C_b, spec.R, spec.S, v, v)
    G = strategy.num_copies
    copies = WeightGradCopies([np.zeros(shape, dtype=np.float32) for _ in range(G)], [])
    tiles = np.array([(oj, oi, b_p, b_q) for oj in range(0, spec.P, b_p) for oi in range(0, spec.Q, b_q)],
                     dtype=np.int64)
    work = strategy.assignments(spec)
    copies.owner = [w.copy for w in work]
    in_row = spec.W_p * v
    in_blk = spec.H_p * in_row
    out_row = spec.Q * v
    out_blk = spec.P * out_row
    I_f, dO_f = I.data.reshape(-1), dO.data.reshape(-1)

    def run(t):
        w = work[t]
        if w.tasks.shape[0] == 0 or w.n_range[0] == w.n_range[1]:
            return
        acc = np.zeros(v * v, dtype=np.float32)
        _kernels.update_worker(I_f, dO_f, copies.copies[w.copy].reshape(-1), w.n_range[0], w.n_range[1],
                               w.tasks, tiles, acc, config.prefetch, spec.C_b, spec.K_b, spec.R, spec.S,
                               spec.stride, v, spec.C_b * in_blk, in_blk, in_row,
                               spec.K_b * out_blk, out_blk, out_row)

    _run_parallel(run, T)
    dW = copies.copies[0] if G == 1 else reduce_weight_copies(copies, T)
    return BlockedWeight(dW, spec.K, spec.C)
