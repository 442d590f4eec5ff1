"""Tile-level schedules and the memory-traffic bookkeeping behind them."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable

from ..tiler import FoldingPlan

DRAM, L2, L1 = "DRAM", "L2", "L1"
READ, WRITE = "read", "write"

# tensor name -> role, as used by both executors
TENSOR_ROLES = {
    "Q": "Q",
    "K": "K",
    "V": "V",
    "B": "Bias",
    "M": "Mask",
    "Z": "Output",
    "Kt": "Intermediate",
    "A": "Intermediate",
    "A_b": "Intermediate",
    "A_m": "Intermediate",
    "SM": "Intermediate",
    "partials": "Intermediate",
}


@dataclass(frozen=True)
class Transfer:
    tensor: str
    level: str
    direction: str
    nbytes: int


@dataclass
class Step:
    op: str
    core: tuple[int, int]
    head: int
    tiles: tuple[int, ...] = ()
    ops: int = 0
    transfers: list[Transfer] = field(default_factory=list)

    def bytes_at(self, level: str, direction: str | None = None) -> int:
        return sum(
            t.nbytes for t in self.transfers
            if t.level == level and (direction is None or t.direction == direction)
        )


@dataclass
class Schedule:
    steps: list[Step]
    plan: FoldingPlan | None = None
    kind: str = "folded"

    def transfers(self) -> Iterable[Transfer]:
        for s in self.steps:
            yield from s.transfers

    def dram_by_tensor(self, direction: str | None = None) -> Counter:
        c: Counter = Counter()
        for t in self.transfers():
            if t.level == DRAM and (direction is None or t.direction == direction):
                c[t.tensor] += t.nbytes
        return c

    @property
    def compute_ops(self) -> int:
        return sum(s.ops for s in self.steps)

    @property
    def cores(self) -> set[tuple[int, int]]:
        return {s.core for s in self.steps if s.ops}

    def summary(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "steps": len(self.steps),
            "dram_read_bytes": dict(sorted(self.dram_by_tensor(READ).items())),
            "dram_write_bytes": dict(sorted(self.dram_by_tensor(WRITE).items())),
            "l2_hop_bytes": sum(t.nbytes for t in self.transfers() if t.tensor == "partials"),
        }


class MemoryModel:
    """First-touch DRAM fetches with L2 reuse and per-core L1 residency.

    A tile is fetched from DRAM the first time any core asks for it; later
    requests are served from L2. A core that already holds the tile in the
    named L1 slot reloads nothing.
    """

    def __init__(self) -> None:
        self._fetched: set[tuple] = set()
        self._l1: dict[tuple[int, int], dict[str, tuple]] = {}

    def load(self, step: Step, tensor: str, key: tuple, nbytes: int, slot: str | None = None) -> None:
        slot = slot or tensor
        resident = self._l1.setdefault(step.core, {})
        full_key = (tensor, *key)
        if resident.get(slot) == full_key:
            return
        if full_key not in self._fetched:
            self._fetched.add(full_key)
            step.transfers.append(Transfer(tensor, DRAM, READ, nbytes))
            step.transfers.append(Transfer(tensor, L2, WRITE, nbytes))
        step.transfers.append(Transfer(tensor, L2, READ, nbytes))
        step.transfers.append(Transfer(tensor, L1, WRITE, nbytes))
        resident[slot] = full_key

    @staticmethod
    def store(step: Step, tensor: str, nbytes: int) -> None:
        step.transfers.append(Transfer(tensor, L1, READ, nbytes))
        step.transfers.append(Transfer(tensor, DRAM, WRITE, nbytes))

    @staticmethod
    def local(step: Step, tensor: str, nbytes: int) -> None:
        step.transfers.append(Transfer(tensor, L1, WRITE, nbytes))

    @staticmethod
    def hop(step: Step, nbytes: int) -> None:
        step.transfers.append(Transfer("partials", L2, WRITE, nbytes))
