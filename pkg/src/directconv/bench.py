"""Benchmark harness: run a pass over a layer table, time it, check it against the oracles."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DEFAULT_CONFIG, EngineConfig
from .errors import ChainShapeMismatch
from .layers import parse_layer_file, resnet50_layers
from .microkernel import F32, I16
from .oracles import (
    conv_backward_naive, conv_forward_im2col, conv_forward_naive, conv_update_naive, int_conv_forward_oracle,
)
from .planner import choose_spatial_blocking, choose_update_strategy
from .propagation import backward, forward, make_forward_plan, prepare_backward, weight_update
from .streams import FusedOp, plan_summary
from .tensors import (
    BlockedActivation, ConvLayerSpec, ErrorNorms, error_norms, from_blocked_weight, to_blocked_activation,
    to_blocked_weight, unblock_activation, block_activation, write_tensor,
)

PASSES = ("F", "B", "U")
DTYPES = (F32, I16)
IMPLS = ("naive", "im2col", "direct")
FUSIONS = ("none", "relu", "bias_relu")

# f32 tolerance against the f64 oracle; i16 must be exact
F32_LINF_REL = 1e-4
F32_L2_REL = 1e-5


@dataclass(frozen=True)
class BenchConfig:
    layers: str = "resnet50"
    minibatch: int = 1
    iterations: int = 1
    pass_: str = "F"
    dtype: str = F32
    impl: str = "direct"
    threads: int = 1
    check: bool = False
    fuse: str = "none"
    seed: int = 0
    layer_ids: tuple[int, ...] | None = None
    engine: EngineConfig = DEFAULT_CONFIG
    dump_dir: str | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.pass_ not in PASSES:
            raise ValueError(f"pass must be one of {PASSES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}")
        if self.impl not in IMPLS:
            raise ValueError(f"impl must be one of {IMPLS}")
        if self.fuse not in FUSIONS:
            raise ValueError(f"fuse must be one of {FUSIONS}")
        if self.fuse != "none" and self.pass_ != "F":
            raise ValueError("fusion applies to the forward pass only")
        if self.impl == "im2col" and (self.pass_ != "F" or self.dtype != F32):
            raise ValueError("the im2col baseline covers f32 forward only")
        if self.dtype == I16 and (self.pass_ == "U" or self.fuse != "none"):
            raise ValueError("i16 covers the forward and backward passes without fusion")

    def specs(self) -> list[ConvLayerSpec]:
        if self.layers == "resnet50":
            specs = resnet50_layers(self.minibatch)
        else:
            specs = parse_layer_file(self.layers, self.minibatch)
        if self.layer_ids is not None:
            wanted = set(self.layer_ids)
            specs = [s for s in specs if s.layer_id in wanted]
        return specs


@dataclass
class LayerResult:
    layer_id: int | None
    shape: dict
    flops: int
    times: list[float]
    norms: ErrorNorms | None = None
    passed: bool | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def best(self) -> float:
        return min(self.times)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    @property
    def gflops(self) -> float:
        return self.flops / self.best / 1e9 if self.best > 0 else float("inf")

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            **self.shape,
            "flops": self.flops,
            "best_s": self.best,
            "mean_s": self.mean,
            "gflops": self.gflops,
            "times_s": list(self.times),
            "norms": asdict(self.norms) if self.norms else None,
            "passed": self.passed,
            "metadata": self.metadata,
        }


@dataclass
class BenchReport:
    config: BenchConfig
    layers: list[LayerResult]

    @property
    def ok(self) -> bool:
        return all(r.passed is not False for r in self.layers)

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["pass"] = cfg.pop("pass_")
        return {"config": cfg, "layers": [r.to_dict() for r in self.layers], "ok": self.ok}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            cols = ["layer_id", "N", "C", "K", "H", "W", "R", "S", "stride", "flops", "best_s", "mean_s",
                    "gflops", "linf_rel", "l2_rel", "passed"]
            with path.open("w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
                w.writeheader()
                for r in self.layers:
                    row = r.to_dict()
                    row.update(asdict(r.norms) if r.norms else {})
                    w.writerow(row)
        else:
            path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))

    def table(self) -> str:
        head = f"{'id':>3} {'N':>3} {'C':>5} {'K':>5} {'H':>4} {'R':>2} {'str':>3} " \
               f"{'best ms':>10} {'mean ms':>10} {'GFLOPS':>8} {'linf_rel':>10} {'l2_rel':>10} check"
        lines = [head]
        for r in self.layers:
            s = r.shape
            n = r.norms
            lines.append(
                f"{r.layer_id if r.layer_id is not None else '-':>3} {s['N']:>3} {s['C']:>5} {s['K']:>5} "
                f"{s['H']:>4} {s['R']:>2} {s['stride']:>3} {r.best * 1e3:>10.3f} {r.mean * 1e3:>10.3f} "
                f"{r.gflops:>8.2f} {n.linf_rel if n else float('nan'):>10.2e} "
                f"{n.l2_rel if n else float('nan'):>10.2e} "
                f"{'-' if r.passed is None else ('ok' if r.passed else 'FAIL')}"
            )
        return "\n".join(lines)


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, EngineConfig):
        return x.to_dict()
    raise TypeError(type(x))


def _shape_dict(spec: ConvLayerSpec) -> dict:
    return {"N": spec.N, "C": spec.C, "K": spec.K, "H": spec.H, "W": spec.W, "R": spec.R, "S": spec.S,
            "stride": spec.stride, "pad_h": spec.pad_h, "pad_w": spec.pad_w, "P": spec.P, "Q": spec.Q}


def random_tensor(rng: np.random.Generator, shape: tuple, dtype: str) -> np.ndarray:
    """Uniform [-0.5, 0.5] for f32, integers in [-256, 255] for i16."""
    if dtype == I16:
        return rng.integers(-256, 256, size=shape, dtype=np.int16)
    return rng.uniform(-0.5, 0.5, size=shape).astype(np.float32)


def make_fusion(kind: str, K: int, rng: np.random.Generator) -> FusedOp | None:
    if kind == "none":
        return None
    if kind == "relu":
        return FusedOp("RELU")
    return FusedOp("BIAS_RELU", rng.uniform(-0.5, 0.5, size=K).astype(np.float32))


@dataclass
class _Case:
    """Inputs, a timed callable and the reference for one layer of a benchmark."""

    run: object
    finish: object
    reference: object
    metadata: dict


def _prepare(spec: ConvLayerSpec, cfg: BenchConfig, rng: np.random.Generator) -> _Case:
    dt, T, eng = cfg.dtype, cfg.threads, cfg.engine
    to64 = (lambda a: a.astype(np.int64)) if dt == I16 else (lambda a: a.astype(np.float64))

    if cfg.pass_ == "F":
        I = random_tensor(rng, spec.input_shape(), dt)
        W = random_tensor(rng, spec.weight_shape(), dt)
        fusion = make_fusion(cfg.fuse, spec.K, rng)

        def reference():
            if dt == I16:
                return int_conv_forward_oracle(spec, I, W)
            O = conv_forward_naive(spec, to64(I), to64(W))
            return fusion.apply(O) if fusion else O

        if cfg.impl == "direct":
            plan = make_forward_plan(spec, T, fusion, eng, dt)
            bI = to_blocked_activation(I, spec)
            bW = to_blocked_weight(W, spec)
            return _Case(lambda: forward(spec, bI, bW, plan), unblock_activation, reference, plan_summary(plan))
        if dt == I16:
            return _Case(lambda: int_conv_forward_oracle(spec, I, W), None, reference, {})
        base = conv_forward_naive if cfg.impl == "naive" else conv_forward_im2col
        run = (lambda: fusion.apply(base(spec, I, W))) if fusion else (lambda: base(spec, I, W))
        return _Case(run, None, reference, {})

    if cfg.pass_ == "B":
        dO = random_tensor(rng, spec.output_shape(), dt)
        W = random_tensor(rng, spec.weight_shape(), dt)

        def reference():
            return conv_backward_naive(spec, dO.astype(np.float64), W.astype(np.float64))

        if cfg.impl == "direct":
            bp = prepare_backward(spec, T, eng, dtype=dt)
            bdO = block_activation(dO, spec.vlen)
            bW = to_blocked_weight(W, spec)
            meta = {"route": bp.route, **(plan_summary(bp.plan) if bp.plan else {})}
            return _Case(lambda: backward(spec, bdO, bW, prepared=bp), unblock_activation, reference, meta)
        if dt == I16:
            # float64 is exact for these magnitudes
            return _Case(lambda: reference().astype(np.int64), None, reference, {})
        return _Case(lambda: conv_backward_naive(spec, dO, W), None, reference, {})

    I = random_tensor(rng, spec.input_shape(), dt)
    dO = random_tensor(rng, spec.output_shape(), dt)

    def reference():
        return conv_update_naive(spec, I.astype(np.float64), dO.astype(np.float64))

    if cfg.impl == "direct":
        strategy = choose_update_strategy(spec, T)
        blocking = choose_spatial_blocking(spec, config=eng)
        bI = to_blocked_activation(I, spec)
        bdO = block_activation(dO, spec.vlen)
        meta = {"strategy": strategy.mode, "copies": strategy.num_copies, "task_split": list(strategy.task_split),
                "spatial_blocking": list(blocking)}
        return _Case(lambda: weight_update(spec, bI, bdO, strategy, blocking, T, eng),
                     lambda bw: from_blocked_weight(bw, spec), reference, meta)
    return _Case(lambda: conv_update_naive(spec, I, dO), None, reference, {})


def run_benchmark(cfg: BenchConfig) -> BenchReport:
    """Time ``cfg.iterations`` repetitions of the pass on every selected layer.

    Data generation, blocking, plan construction and one warm-up call happen
    before timing starts. Layers draw from one seeded generator in table order.
    """
    rng = np.random.default_rng(cfg.seed)
    results = []
    for spec in cfg.specs():
        case = _prepare(spec, cfg, rng)
        out = case.run()
        times = []
        for _ in range(cfg.iterations):
            t0 = time.perf_counter()
            out = case.run()
            times.append(time.perf_counter() - t0)
        res = LayerResult(spec.layer_id, _shape_dict(spec), spec.flops, times, metadata=case.metadata)
        if cfg.check:
            cand = case.finish(out) if case.finish else out
            ref = case.reference()
            res.norms = error_norms(ref, cand)
            if cfg.dtype == I16:
                res.passed = res.norms.linf_abs == 0.0
            else:
                res.passed = res.norms.within(F32_LINF_REL, F32_L2_REL)
            if cfg.dump_dir:
                d = Path(cfg.dump_dir)
                d.mkdir(parents=True, exist_ok=True)
                tag = f"L{spec.layer_id}_{cfg.pass_}_{cfg.impl}_{cfg.dtype}"
                write_tensor(d / f"{tag}_ref.cft", np.asarray(ref))
                write_tensor(d / f"{tag}_out.cft", np.asarray(cand))
        results.append(res)
    return BenchReport(cfg, results)


@dataclass(frozen=True)
class ChainLayer:
    spec: ConvLayerSpec
    fusion: FusedOp | None = None


@dataclass
class ChainResult:
    output: BlockedActivation
    layers: list[dict]

    def canonical(self) -> np.ndarray:
        return unblock_activation(self.output)


def check_chain(specs: list[ConvLayerSpec]) -> None:
    for a, b in zip(specs, specs[1:]):
        if a.K != b.C:
            raise ChainShapeMismatch(f"layer {a.layer_id} -> {b.layer_id}: K={a.K} != C={b.C}")
        if (a.P, a.Q) != (b.H, b.W):
            raise ChainShapeMismatch(
                f"layer {a.layer_id} -> {b.layer_id}: output {a.P}x{a.Q} != input {b.H}x{b.W}")
        if a.vlen != b.vlen:
            raise ChainShapeMismatch(f"vlen {a.vlen} != {b.vlen}")


def run_chain(chain: list[ChainLayer], N: int, threads: int = 1, I: np.ndarray | None = None,
              weights: list[np.ndarray] | None = None, seed: int = 0,
              config: EngineConfig = DEFAULT_CONFIG) -> ChainResult:
    """Forward through consecutive layers, each output (fused op applied) feeding the next.

    Missing input or weights are drawn from ``seed``. Only the halo is added
    between layers; activations stay blocked throughout.
    """
    if not chain:
        raise ValueError("empty chain")
    specs = [c.spec.with_minibatch(N) for c in chain]
    check_chain(specs)
    rng = np.random.default_rng(seed)
    if I is None:
        I = random_tensor(rng, specs[0].input_shape(), F32)
    if weights is None:
        weights = [random_tensor(rng, s.weight_shape(), F32) for s in specs]
    if len(weights) != len(specs):
        raise ChainShapeMismatch(f"{len(weights)} weight tensors for {len(specs)} layers")
    cur = to_blocked_activation(I, specs[0])
    report = []
    for spec, layer, w in zip(specs, chain, weights):
        plan = make_forward_plan(spec, threads, layer.fusion, config, F32)
        bW = to_blocked_weight(w, spec)
        t0 = time.perf_counter()
        out = forward(spec, cur.with_halo(spec.pad_h, spec.pad_w), bW, plan)
        dt = time.perf_counter() - t0
        report.append({"layer_id": spec.layer_id, "fusion": layer.fusion.kind if layer.fusion else None,
                       "seconds": dt, "flops": spec.flops})
        cur = out
    return ChainResult(cur, report)
