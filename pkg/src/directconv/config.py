from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class EngineConfig:
    """Tunables shared by the planner, microkernels and streams."""

    min_accumulators: int = 8
    max_accumulators: int = 28
    cache_budget: int = 512 * 1024  # bytes per thread, spatial blocking of the update pass
    threads: int = 1
    prefetch: bool = True
    prefetch_distance: int = 1
    streaming_stores: bool = False
    acc_chain_limit: int = 512
    i16_bound: int = 256  # declared magnitude bound of i16 operands

    def __post_init__(self):
        if not 1 <= self.min_accumulators <= self.max_accumulators:
            raise ValueError("need 1 <= min_accumulators <= max_accumulators")
        if self.threads < 1 or self.prefetch_distance < 1 or self.acc_chain_limit < 1:
            raise ValueError("threads, prefetch_distance and acc_chain_limit must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path) -> EngineConfig:
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CONFIG = EngineConfig()
