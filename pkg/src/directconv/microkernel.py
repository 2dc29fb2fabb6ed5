"""Specialized small-convolution kernels.

A :class:`MicrokernelDescriptor` fixes everything a kernel needs to know at
layer-setup time (blocking, filter geometry, row pitches, datatype). Building
it validates the descriptor and returns a :class:`CompiledKernel` that is then
called many times with sub-tensor offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .config import DEFAULT_CONFIG, EngineConfig
from .errors import InvalidDescriptor, OverflowRisk
from .tensors import ConvLayerSpec

FWD = "FWD"
UPD = "UPD"
F32 = "f32"
I16 = "i16"

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class MicrokernelDescriptor:
    """Specialization parameters of one kernel.

    For the update pass ``rb_p``/``rb_q`` hold the spatial block ``B_P``/``B_Q``.
    ``in_width`` and ``out_width`` are the row pitches (in pixels) of the
    input and output buffers; ``out_step`` spaces consecutive output pixels
    (1 except for the strided scatter used by 1x1 backward).
    """

    pass_: str = FWD
    vlen: int = 16
    rb_p: int = 1
    rb_q: int = 1
    R: int = 1
    S: int = 1
    stride: int = 1
    in_width: int = 1
    out_width: int = 1
    out_step: int = 1
    dtype: str = F32
    prefetch_enabled: bool = True
    streaming_stores: bool = False
    acc_chain_limit: int | None = None
    bound_i: int = 256
    bound_w: int = 256
    in_channels: int | None = None
    remainder: bool = False
    out_p: int | None = None
    out_q: int | None = None
    min_accumulators: int = DEFAULT_CONFIG.min_accumulators
    max_accumulators: int = DEFAULT_CONFIG.max_accumulators

    @property
    def b_p(self) -> int:
        return self.rb_p

    @property
    def b_q(self) -> int:
        return self.rb_q

    @property
    def in_row(self) -> int:
        return self.in_width * self.vlen

    @property
    def out_row(self) -> int:
        return self.out_width * self.vlen * self.out_step

    @property
    def out_col(self) -> int:
        return self.vlen * self.out_step

    @property
    def accumulators(self) -> int:
        return self.rb_p * self.rb_q


def certify_i16(desc: MicrokernelDescriptor) -> None:
    """Raise :class:`OverflowRisk` unless the declared operand bounds rule out i32 overflow.

    Two budgets are checked: one flushed accumulation chain
    (``acc_chain_limit`` products) and the full reduction over
    ``R * S * in_channels`` products held in the 32-bit output.
    """
    if desc.acc_chain_limit is None or desc.acc_chain_limit < 1:
        raise InvalidDescriptor("i16 kernels need acc_chain_limit >= 1")
    per_product = desc.bound_i * desc.bound_w
    if desc.acc_chain_limit * per_product > INT32_MAX:
        raise OverflowRisk(
            f"chain of {desc.acc_chain_limit} products bounded by {per_product} exceeds 2^31-1")
    if desc.in_channels is not None:
        total = desc.R * desc.S * desc.in_channels * per_product
        if total > INT32_MAX:
            raise OverflowRisk(
                f"full reduction R*S*C*bound = {total} exceeds 2^31-1")


def validate_descriptor(desc: MicrokernelDescriptor) -> None:
    if desc.pass_ not in (FWD, UPD):
        raise InvalidDescriptor(f"unknown pass {desc.pass_!r}")
    if desc.dtype not in (F32, I16):
        raise InvalidDescriptor(f"unknown dtype {desc.dtype!r}")
    for name in ("vlen", "rb_p", "rb_q", "R", "S", "stride", "in_width", "out_width", "out_step"):
        if getattr(desc, name) < 1:
            raise InvalidDescriptor(f"{name} must be >= 1")
    if desc.pass_ == FWD:
        if desc.in_width < (desc.rb_q - 1) * desc.stride + desc.S:
            raise InvalidDescriptor("input row pitch too small for the register block")
        if desc.out_width < (desc.rb_q - 1) * desc.out_step + 1:
            raise InvalidDescriptor("output row pitch too small for the register block")
        if desc.accumulators > desc.max_accumulators:
            raise InvalidDescriptor(
                f"RB_P*RB_Q = {desc.accumulators} exceeds max_accumulators {desc.max_accumulators}")
        if not desc.remainder:
            needed = desc.min_accumulators
            if desc.out_p is not None and desc.out_q is not None:
                needed = min(needed, desc.out_p * desc.out_q)
            if desc.accumulators < needed:
                raise InvalidDescriptor(
                    f"RB_P*RB_Q = {desc.accumulators} cannot hide FMA latency (need {needed})")
        if desc.out_p is not None and desc.rb_p > desc.out_p:
            raise InvalidDescriptor("RB_P larger than P")
        if desc.out_q is not None and desc.rb_q > desc.out_q:
            raise InvalidDescriptor("RB_Q larger than Q")
    else:
        if desc.dtype != F32:
            raise InvalidDescriptor("update kernels are f32 only")
        if desc.in_width < (desc.rb_q - 1) * desc.stride + 1:
            raise InvalidDescriptor("input row pitch too small for the pixel block")
    if desc.dtype == I16:
        certify_i16(desc)


@dataclass(frozen=True)
class CompiledKernel:
    """An executable kernel bound to its descriptor.

    ``kernel(inp, i_off, wt, w_off, out, o_off, pf_in, pf_wt, pf_out)`` works on
    flat buffers; the three prefetch offsets are hints only. For update
    kernels the operand order is ``(inp, i_off, dout, o_off, dw, w_off, ...)``.
    """

    desc: MicrokernelDescriptor
    _scratch: dict = field(default_factory=dict, compare=False, repr=False)

    def scratch(self) -> tuple[np.ndarray, ...]:
        d = self.desc
        if d.pass_ == UPD:
            return (np.zeros(d.vlen * d.vlen, dtype=np.float32),)
        n = d.accumulators * d.vlen
        if d.dtype == I16:
            return np.zeros(n, dtype=np.int32), np.zeros(n, dtype=np.int32)
        return (np.zeros(n, dtype=np.float32),)

    def __call__(self, inp, i_off, wt, w_off, out, o_off, pf_in=-1, pf_wt=-1, pf_out=-1, scratch=None):
        d = self.desc
        if scratch is None:
            scratch = self._scratch.get("buf")
            if scratch is None:
                scratch = self._scratch.setdefault("buf", self.scratch())
        pf = d.prefetch_enabled
        if d.pass_ == UPD:
            _kernels.conv_upd_f32(inp, i_off, wt, w_off, out, o_off, pf_in, pf_wt, pf_out, pf, scratch[0],
                                  d.rb_p, d.rb_q, d.stride, d.vlen, d.in_row, d.out_width * d.vlen)
        elif d.dtype == I16:
            _kernels.conv_fwd_i16(inp, i_off, wt, w_off, out, o_off, pf_in, pf_wt, pf_out, pf,
                                  scratch[0], scratch[1], d.rb_p, d.rb_q, d.R, d.S, d.stride, d.vlen,
                                  d.in_row, d.out_row, d.out_col, d.acc_chain_limit)
        else:
            _kernels.conv_fwd_f32(inp, i_off, wt, w_off, out, o_off, pf_in, pf_wt, pf_out, pf, scratch[0],
                                  d.rb_p, d.rb_q, d.R, d.S, d.stride, d.vlen, d.in_row, d.out_row, d.out_col)


def build_forward_kernel(desc: MicrokernelDescriptor) -> CompiledKernel:
    if desc.pass_ != FWD:
        raise InvalidDescriptor("forward kernel needs pass FWD")
    if desc.dtype != F32:
        raise InvalidDescriptor("use build_forward_kernel_i16 for integer kernels")
    validate_descriptor(desc)
    return CompiledKernel(desc)


def build_forward_kernel_i16(desc: MicrokernelDescriptor) -> CompiledKernel:
    if desc.pass_ != FWD or desc.dtype != I16:
        raise InvalidDescriptor("i16 forward kernel needs pass FWD and dtype i16")
    validate_descriptor(desc)
    return CompiledKernel(desc)


def build_update_kernel(desc: MicrokernelDescriptor) -> CompiledKernel:
    if desc.pass_ != UPD:
        raise InvalidDescriptor("update kernel needs pass UPD")
    validate_descriptor(desc)
    return CompiledKernel(desc)


def build_kernel(desc: MicrokernelDescriptor) -> CompiledKernel:
    if desc.pass_ == UPD:
        return build_update_kernel(desc)
    if desc.dtype == I16:
        return build_forward_kernel_i16(desc)
    return build_forward_kernel(desc)


@dataclass(frozen=True)
class RegisterBlocking:
    """Primary register block plus optional boundary blocks along P and Q."""

    rb_p: int
    rb_q: int
    rem_p: int | None = None
    rem_q: int | None = None

    @property
    def primary(self) -> tuple[int, int]:
        return self.rb_p, self.rb_q

    @property
    def remainder(self) -> tuple[int, int] | None:
        if self.rem_p is None and self.rem_q is None:
            return None
        return (self.rem_p or self.rb_p, self.rem_q or self.rb_q)

    def row_tiles(self, P: int) -> list[tuple[int, int]]:
        return _tiles(P, self.rb_p)

    def col_tiles(self, Q: int) -> list[tuple[int, int]]:
        return _tiles(Q, self.rb_q)

    def tiles(self, P: int, Q: int) -> list[tuple[int, int, int, int]]:
        """(oj, oi, rows, cols) of every output tile in row-major order."""
        return [(oj, oi, rows, cols) for oj, rows in self.row_tiles(P) for oi, cols in self.col_tiles(Q)]

    def variants(self) -> list[tuple[int, int]]:
        """Distinct (rows, cols) kernel shapes; index 0 is the primary block."""
        out = [(self.rb_p, self.rb_q)]
        for shape in ((self.rb_p, self.rem_q), (self.rem_p, self.rb_q), (self.rem_p, self.rem_q)):
            if None not in shape and shape not in out:
                out.append(shape)
        return out


def _tiles(extent: int, block: int) -> list[tuple[int, int]]:
    return [(start, min(block, extent - start)) for start in range(0, extent, block)]


def select_register_blocking(spec: ConvLayerSpec, config: EngineConfig = DEFAULT_CONFIG) -> RegisterBlocking:
    """Pick the output-pixel register block for the forward kernel.

    RB_Q is the largest value up to ``min(Q, max_accumulators)``; RB_P then
    grows (pixel blocking) until RB_P*RB_Q reaches ``min_accumulators``.
    Leftover rows/columns get a second, smaller kernel.
    """
    P, Q = spec.P, spec.Q
    lo, hi = config.min_accumulators, config.max_accumulators
    if P * Q < lo:
        return RegisterBlocking(P, min(Q, hi))
    rb_q = min(Q, hi)
    rb_p = 1
    while rb_p * rb_q < lo and rb_p < P and (rb_p + 1) * rb_q <= hi:
        rb_p += 1
    rem_p = P % rb_p or None
    rem_q = Q % rb_q or None
    return RegisterBlocking(rb_p, rb_q, rem_p, rem_q)


def forward_descriptors(spec: ConvLayerSpec, blocking: RegisterBlocking, config: EngineConfig = DEFAULT_CONFIG,
                        dtype: str = F32, out_width: int | None = None, out_step: int = 1) -> list[MicrokernelDescriptor]:
    """One descriptor per kernel variant of a forward layer, index-aligned with ``blocking.variants()``."""
    descs = []
    for idx, (rows, cols) in enumerate(blocking.variants()):
        descs.append(MicrokernelDescriptor(
            pass_=FWD, vlen=spec.vlen, rb_p=rows, rb_q=cols, R=spec.R, S=spec.S, stride=spec.stride,
            in_width=spec.W_p, out_width=out_width if out_width is not None else spec.Q, out_step=out_step,
            dtype=dtype, prefetch_enabled=config.prefetch, streaming_stores=config.streaming_stores,
            acc_chain_limit=config.acc_chain_limit if dtype == I16 else None,
            bound_i=config.i16_bound, bound_w=config.i16_bound,
            in_channels=spec.C if dtype == I16 else None,
            remainder=idx > 0, out_p=spec.P, out_q=spec.Q,
            min_accumulators=config.min_accumulators, max_accumulators=config.max_accumulators,
        ))
    return descs
