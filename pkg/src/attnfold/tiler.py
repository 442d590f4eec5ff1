"""L1 tiling search for the folded attention chain.

The search enumerates (rows_q, rows_k) tile pairs that respect kernel
granularities, orders them so the largest Q tile comes first, and picks the
first pair whose per-core L1 footprint fits. If nothing fits with the whole
chain fused (level 3), the final SM*V MatMul is dropped from the fused region
(level 2); failing that the block runs unfolded (level 1).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

from .errors import NotApplicableError, UnpaddedShapeError
from .hw import KernelGranularity, NpuConfig, round_up
from .transforms import PadPlan, TransposePlan

KV_PINNED = "KvPinned"
KV_SPLIT = "KvSplit"


@dataclass(frozen=True)
class AttentionShape:
    """Per-block attention extents.

    ``heads`` counts query heads; ``kv_heads`` (defaults to ``heads``) counts
    distinct K/V heads. ``bias_heads``/``mask_heads`` say how many distinct
    score-shaped bias/mask slices exist (1 when shared by every head).
    """

    heads: int
    lq: int
    lk: int
    d: int
    dv: int
    has_bias: bool = False
    has_mask: bool = False
    kv_heads: int | None = None
    bias_heads: int | None = None
    mask_heads: int | None = None
    k_transpose: bool = True

    def __post_init__(self):
        for name in ("heads", "lq", "lk", "d", "dv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kv_heads is None:
            object.__setattr__(self, "kv_heads", self.heads)
        for name in ("bias_heads", "mask_heads"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, self.heads)
        if self.kv_heads < 1 or self.heads % self.kv_heads:
            raise ValueError(f"{self.heads} query heads cannot share {self.kv_heads} kv heads")
        for name in ("bias_heads", "mask_heads"):
            n = getattr(self, name)
            if n < 1 or self.heads % n:
                raise ValueError(f"{name}={n} does not divide heads={self.heads}")

    @property
    def group(self) -> int:
        return self.heads // self.kv_heads

    def padded(self, gran: KernelGranularity) -> AttentionShape:
        return dataclasses.replace(
            self,
            lq=round_up(self.lq, gran.m_min),
            lk=round_up(self.lk, gran.key_granule),
            d=round_up(self.d, gran.k_min),
            dv=round_up(self.dv, gran.n_min),
        )

    def is_padded(self, gran: KernelGranularity) -> bool:
        return self.padded(gran) == self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> AttentionShape:
        return cls(**doc)


@dataclass(frozen=True)
class Subvolumes:
    """Tile extents, in elements, for Q, K, V and the score-shaped B/M tiles."""

    rows_q: int
    rows_k: int
    d: int
    dv: int
    has_bias: bool = False
    has_mask: bool = False

    @property
    def s_q(self) -> tuple[int, int]:
        return (self.rows_q, self.d)

    @property
    def s_k(self) -> tuple[int, int]:
        return (self.rows_k, self.d)

    @property
    def s_v(self) -> tuple[int, int]:
        return (self.rows_k, self.dv)

    @property
    def s_b(self) -> tuple[int, int] | None:
        return (self.rows_q, self.rows_k) if self.has_bias else None

    @property
    def s_m(self) -> tuple[int, int] | None:
        return (self.rows_q, self.rows_k) if self.has_mask else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "s_q": list(self.s_q),
            "s_k": list(self.s_k),
            "s_v": list(self.s_v),
            "s_b": list(self.s_b) if self.s_b else None,
            "s_m": list(self.s_m) if self.s_m else None,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> Subvolumes:
        rq, d = doc["s_q"]
        rk, dv = doc["s_v"]
        return cls(rq, rk, d, dv, doc.get("s_b") is not None, doc.get("s_m") is not None)


@dataclass(frozen=True)
class SpatialStrategy:
    mode: str
    q_unroll_rows: int
    head_unroll_cols: int
    reduce_cols: int
    heads_temporal: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FoldingPlan:
    folding_level: int
    shape: AttentionShape
    subvolumes: Subvolumes | None = None
    strategy: SpatialStrategy | None = None
    l1_footprint_bytes: int = 0
    buffering: int = 2
    logical: AttentionShape | None = None
    transpose_plan: TransposePlan | None = None
    padding_plans: tuple[PadPlan, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.folding_level not in (1, 2, 3):
            raise ValueError(f"folding_level must be 1, 2 or 3, got {self.folding_level}")
        if self.folding_level >= 2 and (self.subvolumes is None or self.strategy is None):
            raise ValueError("folded plans need subvolumes and a strategy")

    @property
    def num_q_tiles(self) -> int:
        return self.shape.lq // self.subvolumes.rows_q

    @property
    def num_k_tiles(self) -> int:
        return self.shape.lk // self.subvolumes.rows_k

    def to_dict(self) -> dict[str, Any]:
        return {
            "folding_level": self.folding_level,
            "shape": self.shape.to_dict(),
            "logical": self.logical.to_dict() if self.logical else None,
            "subvolumes": self.subvolumes.to_dict() if self.subvolumes else None,
            "strategy": self.strategy.to_dict() if self.strategy else None,
            "l1_footprint_bytes": self.l1_footprint_bytes,
            "buffering": self.buffering,
            "transpose_plan": self.transpose_plan.to_dict() if self.transpose_plan else None,
            "padding_plans": [p.to_dict() for p in self.padding_plans],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> FoldingPlan:
        sv = doc.get("subvolumes")
        st = doc.get("strategy")
        tp = doc.get("transpose_plan")
        logical = doc.get("logical")
        return cls(
            folding_level=doc["folding_level"],
            shape=AttentionShape.from_dict(doc["shape"]),
            subvolumes=Subvolumes.from_dict(sv) if sv else None,
            strategy=SpatialStrategy(**st) if st else None,
            l1_footprint_bytes=doc.get("l1_footprint_bytes", 0),
            buffering=doc.get("buffering", 2),
            logical=AttentionShape.from_dict(logical) if logical else None,
            transpose_plan=TransposePlan.from_dict(tp) if tp else None,
            padding_plans=tuple(PadPlan.from_dict(p) for p in doc.get("padding_plans", ())),
        )


def _check_padded(shape: AttentionShape, gran: KernelGranularity) -> None:
    if not shape.is_padded(gran):
        raise UnpaddedShapeError(
            f"shape (lq={shape.lq}, lk={shape.lk}, d={shape.d}, dv={shape.dv}) is not "
            f"padded to kernel granularities; pad it first (expected {shape.padded(gran)})"
        )


def _tile_sizes(extent: int, granule: int) -> list[int]:
    return [t for t in range(granule, extent + 1, granule) if extent % t == 0]


def enumerate_tilings(shape: AttentionShape, gran: KernelGranularity) -> list[Subvolumes]:
    """All granularity-aligned tilings of a padded shape, largest Q tile first.

    Ties on the Q tile are broken by larger K tile, then larger V tile, then
    fewer total tiles.
    """
    _check_padded(shape, gran)
    cands = [
        Subvolumes(rq, rk, shape.d, shape.dv, shape.has_bias, shape.has_mask)
        for rq in _tile_sizes(shape.lq, gran.m_min)
        for rk in _tile_sizes(shape.lk, gran.key_granule)
    ]
    cands.sort(
        key=lambda sv: (
            -sv.rows_q,
            -sv.rows_k,
            -sv.rows_k * sv.dv,
            (shape.lq // sv.rows_q) * (shape.lk // sv.rows_k),
        )
    )
    return cands


def l1_footprint(
    sv: Subvolumes,
    level: int,
    cfg: NpuConfig,
    has_b: bool,
    has_m: bool,
    *,
    kv_pinned: bool = False,
    buffering: int = 2,
) -> int:
    """Peak per-core L1 bytes for one fused tile step.

    Streamed operands get ``buffering`` copies. K/V tiles stream when K/V are
    split across tiles; when they are pinned (one K/V tile covers the whole
    key axis) the Q tiles stream instead. Bias/mask tiles change with every
    (q, k) step and always stream.
    """
    if level not in (2, 3):
        raise ValueError("footprint is defined for folding levels 2 and 3")
    rq, rk = sv.rows_q, sv.rows_k
    q_buf = buffering if kv_pinned else 1
    kv_buf = 1 if kv_pinned else buffering
    score = rq * rk
    elems = q_buf * rq * sv.d + kv_buf * rk * sv.d + score + 2 * rq
    if level == 3:
        elems += kv_buf * rk * sv.dv + rq * sv.dv
    if has_b:
        elems += buffering * score
    if has_m:
        elems += buffering * score
    return elems * cfg.elem_bytes


def _strategy(shape: AttentionShape, sv: Subvolumes, cfg: NpuConfig) -> SpatialStrategy:
    nq = math.ceil(shape.lq / sv.rows_q)
    rows = min(cfg.rows, nq)
    if sv.rows_k == shape.lk:
        return SpatialStrategy(KV_PINNED, rows, min(cfg.cols, shape.heads), 1, False)
    nk = math.ceil(shape.lk / sv.rows_k)
    return SpatialStrategy(KV_SPLIT, rows, 1, min(cfg.cols, nk), True)


def select_tiling(
    shape: AttentionShape,
    gran: KernelGranularity,
    cfg: NpuConfig,
    *,
    buffering: int = 2,
) -> FoldingPlan:
    """Pick the first L1-feasible tiling, trying level 3, then 2, then giving up."""
    tilings = enumerate_tilings(shape, gran)
    for level in (3, 2):
        for sv in tilings:
            pinned = sv.rows_k == shape.lk
            fp = l1_footprint(
                sv, level, cfg, shape.has_bias, shape.has_mask,
                kv_pinned=pinned, buffering=buffering,
            )
            if fp <= cfg.l1_bytes:
                return FoldingPlan(
                    folding_level=level,
                    shape=shape,
                    subvolumes=sv,
                    strategy=_strategy(shape, sv, cfg),
                    l1_footprint_bytes=fp,
                    buffering=buffering,
                )
    return FoldingPlan(folding_level=1, shape=shape, buffering=buffering)


def active_cores(plan: FoldingPlan) -> int:
    st = plan.strategy
    if st.mode == KV_PINNED:
        return st.q_unroll_rows * st.head_unroll_cols
    return st.q_unroll_rows * st.reduce_cols


def utilization(plan: FoldingPlan, shape: AttentionShape, cfg: NpuConfig) -> float:
    """Fraction of the core grid that receives at least one tile."""
    if plan.folding_level < 2:
        raise NotApplicableError("utilization is defined only for folded plans")
    return active_cores(plan) / cfg.num_cores


def unfolded_utilization(shape: AttentionShape, gran: KernelGranularity, cfg: NpuConfig) -> float:
    """Core occupancy of standalone (unfolded) kernels.

    Each op unrolls m_min-row blocks over core rows and heads over columns.
    """
    rows = min(cfg.rows, math.ceil(shape.lq / gran.m_min))
    cols = min(cfg.cols, shape.heads)
    return rows * cols / cfg.num_cores
