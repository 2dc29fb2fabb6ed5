"""Loop ordering, thread partitioning and weight-update strategy selection."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_CONFIG, EngineConfig
from .errors import InfeasibleStrategy
from .microkernel import RegisterBlocking, select_register_blocking
from .tensors import ConvLayerSpec

LOOP_SYMBOLS = ("n", "k_b", "c_b", "ojb", "oib")

TASK_PARALLEL = "TASK_PARALLEL"
COPY_REDUCE = "COPY_REDUCE"
HYBRID = "HYBRID"


@dataclass(frozen=True)
class LoopOrder:
    loops: tuple[str, ...] = LOOP_SYMBOLS

    def __post_init__(self):
        if sorted(self.loops) != sorted(LOOP_SYMBOLS):
            raise ValueError(f"loop order must be a permutation of {LOOP_SYMBOLS}, got {self.loops}")

    @property
    def pull_in_cb(self) -> bool:
        """True when c_b runs inside both spatial block loops."""
        return self.loops.index("c_b") > max(self.loops.index("ojb"), self.loops.index("oib"))


DEFAULT_ORDER = LoopOrder(("n", "k_b", "c_b", "ojb", "oib"))
PULLED_IN_ORDER = LoopOrder(("n", "k_b", "ojb", "oib", "c_b"))


def choose_loop_order(spec: ConvLayerSpec) -> LoopOrder:
    # 1x1 filters get little register reuse of O unless c_b moves inside the tile loops
    if spec.R == 1 and spec.S == 1:
        return PULLED_IN_ORDER
    return DEFAULT_ORDER


@dataclass(frozen=True)
class ThreadPartition:
    """Contiguous split of the (n, k_b, ojb, oib) work-item space.

    Only the leading ``level`` dimensions are divided; each thread owns whole
    sub-spaces of the remaining ones. ``ranges[t]`` is a half-open interval
    over the flattened leading dimensions.
    """

    T: int
    dims: tuple[int, int, int, int]
    level: int
    ranges: tuple[tuple[int, int], ...]

    @property
    def inner(self) -> int:
        return math.prod(self.dims[self.level:])

    def item_counts(self) -> list[int]:
        return [(b - a) * self.inner for a, b in self.ranges]

    def owner_array(self) -> np.ndarray:
        prefix = np.empty(math.prod(self.dims[:self.level]), dtype=np.int64)
        for t, (a, b) in enumerate(self.ranges):
            prefix[a:b] = t
        owner = np.repeat(prefix, self.inner)
        return owner.reshape(self.dims)

    def items(self, t: int) -> list[tuple[int, int, int, int]]:
        a, b = self.ranges[t]
        lead = self.dims[:self.level]
        rest = self.dims[self.level:]
        out = []
        for flat in range(a, b):
            head = np.unravel_index(flat, lead) if lead else ()
            for tail in itertools.product(*(range(d) for d in rest)):
                out.append(tuple(int(x) for x in (*head, *tail)))
        return out


def work_dims(spec: ConvLayerSpec, blocking: RegisterBlocking) -> tuple[int, int, int, int]:
    return (spec.N, spec.K_b, len(blocking.row_tiles(spec.P)), len(blocking.col_tiles(spec.Q)))


def partition_threads(spec: ConvLayerSpec, T: int, blocking: RegisterBlocking | None = None) -> ThreadPartition:
    """Split the minibatch first, then output-channel blocks, then spatial blocks."""
    if T < 1:
        raise ValueError("T must be >= 1")
    blocking = blocking or select_register_blocking(spec)
    dims = work_dims(spec, blocking)
    level = 1
    while level < 4 and math.prod(dims[:level]) < T:
        level += 1
    total = math.prod(dims[:level])
    base, extra = divmod(total, T)
    ranges = []
    start = 0
    for t in range(T):
        size = base + (1 if t < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ThreadPartition(T, dims, level, tuple(ranges))


@dataclass(frozen=True)
class ThreadWork:
    copy: int
    n_range: tuple[int, int]
    tasks: np.ndarray  # rows of (k_b, c_b, r, s)


@dataclass(frozen=True)
class WeightUpdateStrategy:
    """How the update pass is parallelized.

    ``num_copies`` (G) private gradient copies each cover a contiguous
    minibatch shard; within a copy, T/G threads split the (r, s), k_b and
    c_b task dimensions ``task_split = (T_rs, T_k, T_c)`` ways.
    """

    mode: str
    num_copies: int
    threads: int
    task_split: tuple[int, int, int]
    parallelism: int
    spec_key: tuple

    @property
    def feasible(self) -> bool:
        return self.parallelism >= self.threads

    @property
    def threads_per_copy(self) -> int:
        return self.threads // self.num_copies

    def copy_ranges(self, N: int) -> list[tuple[int, int]]:
        return _split_range(N, self.num_copies)

    def assignments(self, spec: ConvLayerSpec) -> list[ThreadWork]:
        t_rs, t_k, t_c = self.task_split
        rs_chunks = _split_range(spec.R * spec.S, t_rs)
        k_chunks = _split_range(spec.K_b, t_k)
        c_chunks = _split_range(spec.C_b, t_c)
        shards = self.copy_ranges(spec.N)
        work = []
        for t in range(self.threads):
            g, local = divmod(t, self.threads_per_copy)
            if local >= t_rs * t_k * t_c:
                work.append(ThreadWork(g, shards[g], np.zeros((0, 4), dtype=np.int64)))
                continue
            i_rs, i_k, i_c = np.unravel_index(local, (t_rs, t_k, t_c))
            tasks = [
                (kb, cb, rs // spec.S, rs % spec.S)
                for kb in range(*k_chunks[i_k])
                for cb in range(*c_chunks[i_c])
                for rs in range(*rs_chunks[i_rs])
            ]
            work.append(ThreadWork(g, shards[g], np.array(tasks, dtype=np.int64).reshape(-1, 4)))
        return work


def _split_range(n: int, parts: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, parts)
    out, start = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _spec_key(spec: ConvLayerSpec) -> tuple:
    return (spec.N, spec.C, spec.K, spec.H, spec.W, spec.R, spec.S, spec.stride, spec.pad_h, spec.pad_w, spec.vlen)


def _sharing_terms(spec: ConvLayerSpec, split: tuple[int, int, int]) -> tuple[float, float]:
    t_rs, t_k, t_c = split
    active = t_rs * t_k * t_c
    return active / t_c, active / t_k


def task_split(spec: ConvLayerSpec, threads: int) -> tuple[int, int, int]:
    """Factor ``threads`` into (T_rs, T_k, T_c) over (r,s), k_b and c_b.

    (r, s) is split first (largest T_rs), then the split minimizing re-read
    traffic wins. If no exact factorization fits the layer, the largest
    product below ``threads`` is used and the remaining threads idle.
    """
    rs, kb, cb = spec.R * spec.S, spec.K_b, spec.C_b
    nchw = spec.N * spec.C * spec.H * spec.W
    nkpq = spec.N * spec.K * spec.P * spec.Q
    best = None
    for t_rs in range(1, min(rs, threads) + 1):
        for t_k in range(1, min(kb, threads) + 1):
            for t_c in range(1, min(cb, threads) + 1):
                active = t_rs * t_k * t_c
                if active > threads:
                    continue
                read_i, read_o = active / t_c, active / t_k
                key = (-active, -t_rs, read_i * nchw + read_o * nkpq, -t_k)
                if best is None or key < best[0]:
                    best = (key, (t_rs, t_k, t_c))
    return best[1]


def make_update_strategy(spec: ConvLayerSpec, T: int, G: int) -> WeightUpdateStrategy:
    if T < 1 or not 1 <= G <= T or T % G:
        raise InfeasibleStrategy(f"G={G} must divide T={T}")
    split = task_split(spec, T // G)
    active = math.prod(split)
    parallelism = min(G, spec.N) * active
    if G == 1:
        mode = TASK_PARALLEL
    elif G == T:
        mode = COPY_REDUCE
    else:
        mode = HYBRID
    return WeightUpdateStrategy(mode, G, T, split, parallelism, _spec_key(spec))


def update_bytes_model(spec: ConvLayerSpec, T: int, strategy: WeightUpdateStrategy, elem_size: int = 4) -> float:
    """Estimated tensor traffic (bytes) of the update pass under ``strategy``.

    Input and output-gradient tensors are re-read once per thread sharing a
    feature-map slice; every extra gradient copy costs a write plus a read
    during reduction on top of the final tensor.
    """
    nchw = spec.N * spec.C * spec.H * spec.W
    nkpq = spec.N * spec.K * spec.P * spec.Q
    rsck = spec.R * spec.S * spec.C * spec.K
    share_i, share_o = _sharing_terms(spec, strategy.task_split)
    G = strategy.num_copies
    weight = rsck if G == 1 else (2 * G + 1) * rsck
    return (share_i * nchw + share_o * nkpq + weight) * elem_size


def choose_update_strategy(spec: ConvLayerSpec, T: int) -> WeightUpdateStrategy:
    """Cheapest feasible strategy by the bytes model; ties go to fewer copies."""
    candidates = [make_update_strategy(spec, T, G) for G in _divisors(T)]
    feasible = [s for s in candidates if s.feasible]
    if feasible:
        return min(feasible, key=lambda s: (update_bytes_model(spec, T, s), s.num_copies))
    return min(candidates, key=lambda s: (-s.parallelism, update_bytes_model(spec, T, s), s.num_copies))


def spatial_footprint(spec: ConvLayerSpec, b_p: int, b_q: int) -> int:
    """Elements touched by one update-kernel invocation."""
    h_in = (b_p - 1) * spec.stride + spec.R
    w_in = (b_q - 1) * spec.stride + spec.S
    v = spec.vlen
    return h_in * w_in * v + b_p * b_q * v + v * v


def choose_spatial_blocking(spec: ConvLayerSpec, cache_budget: float | None = None,
                            elem_size: int = 4, config: EngineConfig = DEFAULT_CONFIG) -> tuple[int, int]:
    """Largest divisor pair (B_P, B_Q) of (P, Q) whose footprint fits the cache budget.

    Ties in area go to the smaller footprint, then the wider block.
    """
    budget = config.cache_budget if cache_budget is None else cache_budget
    best = None
    for b_p in _divisors(spec.P):
        for b_q in _divisors(spec.Q):
            fp = spatial_footprint(spec, b_p, b_q) * elem_size
            if fp > budget and (b_p, b_q) != (1, 1):
                continue
            key = (-(b_p * b_q), fp, -b_q)
            if best is None or key < best[0]:
                best = (key, (b_p, b_q))
    return best[1]
