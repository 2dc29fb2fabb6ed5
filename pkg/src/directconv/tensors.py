"""Layer geometry, VLEN-blocked tensor layouts and error norms.

Canonical layouts are NCHW for activations and KCRS for weights. Blocked
layouts split the channel dimensions into ``vlen``-wide blocks and move the
lane index innermost:

    activation  [N][C_b][H + 2*pad_h][W + 2*pad_w][vlen]
    weight      [K_b][C_b][R][S][vlen_c][vlen_k]

Logical zero padding is materialized as a physical halo so that kernels can
index sub-tensors without boundary checks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NonIntegralShape, ShapeMismatch

DEFAULT_VLEN = 16


@dataclass(frozen=True)
class ConvLayerSpec:
    """A single convolution problem.

    ``pad_h``/``pad_w`` default to ``(R - 1) // 2`` for odd filters and 0
    otherwise, which reproduces "same" geometry for stride-1 layers.
    """

    N: int
    C: int
    K: int
    H: int
    W: int
    R: int
    S: int
    stride: int = 1
    pad_h: int | None = None
    pad_w: int | None = None
    vlen: int = DEFAULT_VLEN
    layer_id: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.pad_h is None:
            object.__setattr__(self, "pad_h", (self.R - 1) // 2 if self.R % 2 else 0)
        if self.pad_w is None:
            object.__setattr__(self, "pad_w", (self.S - 1) // 2 if self.S % 2 else 0)
        for name in ("N", "C", "K", "H", "W", "R", "S", "stride", "vlen"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeMismatch("padding must be non-negative")
        if self.R > self.H + 2 * self.pad_h or self.S > self.W + 2 * self.pad_w:
            raise ShapeMismatch("filter larger than padded input")

    @property
    def P(self) -> int:
        return derive_output_shape(self)[0]

    @property
    def Q(self) -> int:
        return derive_output_shape(self)[1]

    @property
    def C_b(self) -> int:
        return -(-self.C // self.vlen)

    @property
    def K_b(self) -> int:
        return -(-self.K // self.vlen)

    @property
    def H_p(self) -> int:
        return self.H + 2 * self.pad_h

    @property
    def W_p(self) -> int:
        return self.W + 2 * self.pad_w

    @property
    def flops(self) -> int:
        return 2 * self.N * self.K * self.C * self.P * self.Q * self.R * self.S

    def with_minibatch(self, N: int) -> ConvLayerSpec:
        return replace(self, N=N)

    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.C, self.H, self.W)

    def output_shape(self) -> tuple[int, int, int, int]:
        return (self.N, self.K, self.P, self.Q)

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.K, self.C, self.R, self.S)


def derive_output_shape(spec: ConvLayerSpec, exact: bool = False) -> tuple[int, int]:
    """Output extents (P, Q) of the padded, strided convolution.

    Trailing input rows/columns that do not fit a whole filter placement are
    skipped (floor semantics). With ``exact=True`` such layers are rejected.
    """
    span_h = spec.H + 2 * spec.pad_h - spec.R
    span_w = spec.W + 2 * spec.pad_w - spec.S
    if span_h < 0 or span_w < 0:
        raise ShapeMismatch("filter larger than padded input")
    if exact and (span_h % spec.stride or span_w % spec.stride):
        raise NonIntegralShape(
            f"({spec.H}+2*{spec.pad_h}-{spec.R}) or ({spec.W}+2*{spec.pad_w}-{spec.S}) "
            f"not divisible by stride {spec.stride}"
        )
    return span_h // spec.stride + 1, span_w // spec.stride + 1


@dataclass
class BlockedActivation:
    """Activation tensor in [N][C_b][H_p][W_p][vlen] layout with a zero halo."""

    data: np.ndarray
    channels: int
    pad_h: int = 0
    pad_w: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ShapeMismatch(f"blocked activation must be 5-D, got {self.data.shape}")
        if not self.data.flags.c_contiguous:
            self.data = np.ascontiguousarray(self.data)

    @property
    def vlen(self) -> int:
        return self.data.shape[4]

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def blocks(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[2] - 2 * self.pad_h

    @property
    def W(self) -> int:
        return self.data.shape[3] - 2 * self.pad_w

    @property
    def dtype(self):
        return self.data.dtype

    def interior(self) -> np.ndarray:
        return self.data[:, :, self.pad_h:self.pad_h + self.H, self.pad_w:self.pad_w + self.W, :]

    def with_halo(self, pad_h: int, pad_w: int) -> BlockedActivation:
        """Copy into a buffer with a freshly zeroed halo of the given width."""
        if (pad_h, pad_w) == (self.pad_h, self.pad_w):
            return self
        n, cb, _, _, v = self.data.shape
        out = np.zeros((n, cb, self.H + 2 * pad_h, self.W + 2 * pad_w, v), dtype=self.dtype)
        out[:, :, pad_h:pad_h + self.H, pad_w:pad_w + self.W, :] = self.interior()
        return BlockedActivation(out, self.channels, pad_h, pad_w, self.scale)

    def tail_lanes_zero(self) -> bool:
        tail = self.channels % self.vlen
        if tail == 0:
            return True
        return not np.any(self.data[:, -1, ..., tail:])

    def halo_zero(self) -> bool:
        mask = np.ones(self.data.shape[2:4], dtype=bool)
        mask[self.pad_h:self.pad_h + self.H, self.pad_w:self.pad_w + self.W] = False
        return not np.any(self.data[:, :, mask, :])


@dataclass
class BlockedWeight:
    """Weight tensor in [K_b][C_b][R][S][vlen_c][vlen_k] layout."""

    data: np.ndarray
    out_channels: int
    in_channels: int
    scale: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 6 or self.data.shape[4] != self.data.shape[5]:
            raise ShapeMismatch(f"blocked weight must be [Kb][Cb][R][S][v][v], got {self.data.shape}")
        if not self.data.flags.c_contiguous:
            self.data = np.ascontiguousarray(self.data)

    @property
    def vlen(self) -> int:
        return self.data.shape[4]

    @property
    def R(self) -> int:
        return self.data.shape[2]

    @property
    def S(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    def tail_lanes_zero(self) -> bool:
        v = self.vlen
        tk, tc = self.out_channels % v, self.in_channels % v
        ok = True
        if tk:
            ok &= not np.any(self.data[-1, :, :, :, :, tk:])
        if tc:
            ok &= not np.any(self.data[:, -1, :, :, tc:, :])
        return bool(ok)


def block_activation(x: np.ndarray, vlen: int = DEFAULT_VLEN, pad_h: int = 0, pad_w: int = 0,
                     dtype=None, scale: float = 1.0) -> BlockedActivation:
    """Block a canonical NCHW array; tail lanes and the halo are zero."""
    if x.ndim != 4:
        raise ShapeMismatch(f"expected NCHW array, got shape {x.shape}")
    n, c, h, w = x.shape
    cb = -(-c // vlen)
    dtype = x.dtype if dtype is None else dtype
    out = np.zeros((n, cb, h + 2 * pad_h, w + 2 * pad_w, vlen), dtype=dtype)
    padded = np.zeros((n, cb * vlen, h, w), dtype=dtype)
    padded[:, :c] = x
    out[:, :, pad_h:pad_h + h, pad_w:pad_w + w, :] = (
        padded.reshape(n, cb, vlen, h, w).transpose(0, 1, 3, 4, 2)
    )
    return BlockedActivation(out, c, pad_h, pad_w, scale)


def unblock_activation(b: BlockedActivation) -> np.ndarray:
    n, cb, _, _, v = b.data.shape
    inner = b.interior().transpose(0, 1, 4, 2, 3).reshape(n, cb * v, b.H, b.W)
    return np.ascontiguousarray(inner[:, :b.channels])


def to_blocked_activation(x: np.ndarray, spec: ConvLayerSpec, dtype=None) -> BlockedActivation:
    """Block a layer input, materializing the spec's padding as a halo."""
    if tuple(x.shape) != spec.input_shape():
        raise ShapeMismatch(f"input shape {x.shape} != {spec.input_shape()}")
    return block_activation(x, spec.vlen, spec.pad_h, spec.pad_w, dtype)


def from_blocked_activation(b: BlockedActivation, spec: ConvLayerSpec | None = None) -> np.ndarray:
    if spec is not None and (b.N, b.channels, b.H, b.W) != spec.input_shape():
        raise ShapeMismatch(f"blocked tensor {(b.N, b.channels, b.H, b.W)} != {spec.input_shape()}")
    return unblock_activation(b)


def to_blocked_weight(w: np.ndarray, spec: ConvLayerSpec | None = None, vlen: int | None = None,
                      dtype=None) -> BlockedWeight:
    if w.ndim != 4:
        raise ShapeMismatch(f"expected KCRS array, got shape {w.shape}")
    if spec is not None:
        if tuple(w.shape) != spec.weight_shape():
            raise ShapeMismatch(f"weight shape {w.shape} != {spec.weight_shape()}")
        vlen = spec.vlen
    vlen = vlen or DEFAULT_VLEN
    k, c, r, s = w.shape
    kb, cb = -(-k // vlen), -(-c // vlen)
    dtype = w.dtype if dtype is None else dtype
    padded = np.zeros((kb * vlen, cb * vlen, r, s), dtype=dtype)
    padded[:k, :c] = w
    # [kb][k][cb][c][r][s] -> [kb][cb][r][s][c][k]
    out = padded.reshape(kb, vlen, cb, vlen, r, s).transpose(0, 2, 4, 5, 3, 1)
    return BlockedWeight(np.ascontiguousarray(out), k, c)


def from_blocked_weight(b: BlockedWeight, spec: ConvLayerSpec | None = None) -> np.ndarray:
    if spec is not None and (b.out_channels, b.in_channels, b.R, b.S) != spec.weight_shape():
        raise ShapeMismatch("blocked weight does not match spec")
    kb, cb, r, s, v, _ = b.data.shape
    full = b.data.transpose(0, 5, 1, 4, 2, 3).reshape(kb * v, cb * v, r, s)
    return np.ascontiguousarray(full[:b.out_channels, :b.in_channels])


@dataclass(frozen=True)
class ErrorNorms:
    linf_abs: float
    l2_abs: float
    linf_rel: float
    l2_rel: float

    def within(self, linf_rel: float, l2_rel: float | None = None) -> bool:
        return self.linf_rel <= linf_rel and (l2_rel is None or self.l2_rel <= l2_rel)


def error_norms(reference: np.ndarray, candidate: np.ndarray) -> ErrorNorms:
    """Absolute and relative L-inf/L2 error of ``candidate`` against ``reference``.

    Relative norms fall back to the absolute ones when the reference norm is 0.
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    d = a - b
    linf = float(np.max(np.abs(d))) if d.size else 0.0
    l2 = float(math.sqrt(np.sum(d * d)))
    ref_inf = float(np.max(np.abs(a))) if a.size else 0.0
    ref_2 = float(math.sqrt(np.sum(a * a)))
    return ErrorNorms(
        linf_abs=linf,
        l2_abs=l2,
        linf_rel=linf / ref_inf if ref_inf else linf,
        l2_rel=l2 / ref_2 if ref_2 else l2,
    )


# Canonical tensor dump format: "CFT1", u32 dtype code, 4 x u64 dims, payload (LE).
_MAGIC = b"CFT1"
_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i2"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sI4Q")


def write_tensor(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatch("CFT1 files hold 4-D tensors")
    dt = x.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {x.dtype}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _DTYPE_CODES[dt], *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=dt).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated CFT1 header")
    magic, code, *dims = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    count = math.prod(dims)
    payload = raw[_HEADER.size:]
    if len(payload) != count * dt.itemsize:
        raise ValueError("payload size does not match header dims")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()
