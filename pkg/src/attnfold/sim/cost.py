"""Roofline cost accounting over schedules."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

from ..hw import NpuConfig
from .schedule import DRAM, Schedule

COMPUTE_BOUND = "ComputeBound"
MEMORY_BOUND = "MemoryBound"


@dataclass(frozen=True)
class CostReport:
    dram_bytes: int
    compute_ops: int
    t_compute: float
    t_memory: float
    latency: float
    bound: str
    utilization: float

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Comparison:
    folded: CostReport
    unfolded: CostReport

    @property
    def speedup(self) -> float:
        if self.folded.latency == 0:
            return 1.0
        return self.unfolded.latency / self.folded.latency

    def to_dict(self) -> dict[str, Any]:
        return {
            "folded": self.folded.to_dict(),
            "unfolded": self.unfolded.to_dict(),
            "speedup": self.speedup,
        }


def account_traffic(s: Schedule) -> int:
    """Total DRAM bytes read plus written."""
    return sum(t.nbytes for t in s.transfers() if t.level == DRAM)


def estimate_latency(s: Schedule, cfg: NpuConfig, util: float) -> CostReport:
    """max(compute at util-scaled peak, DRAM bytes over bandwidth).

    Utilization scales only the compute term; DRAM bandwidth is shared by the
    whole array regardless of how many cores are busy.
    """
    if not 0 < util <= 1:
        raise ValueError(f"utilization must be in (0, 1], got {util}")
    dram = account_traffic(s)
    ops = s.compute_ops
    if not s.steps:
        return CostReport(0, 0, 0.0, 0.0, 0.0, COMPUTE_BOUND, util)
    t_c = ops / (cfg.peak_ops_per_s * util)
    t_m = dram / cfg.dram_bw_bytes_per_s
    bound = MEMORY_BOUND if t_m > t_c else COMPUTE_BOUND
    return CostReport(dram, ops, t_c, t_m, max(t_c, t_m), bound, util)
