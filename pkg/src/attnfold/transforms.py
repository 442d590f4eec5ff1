"""Transpose and padding planning, plus the data-level operators they imply.

K arrives row-major as (Lk, d) while Q*K^T wants it column-major. A DMA
engine whose minimum stride exceeds one element cannot permute single
elements, so the transpose is split: the DMA moves whole block x block tiles
into transposed grid positions while staging through L2, and the consuming
MatMul transposes inside each tile in registers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import DimensionError, MustPadFirstError, UnpaddableError
from .hw import KernelGranularity, NpuConfig, round_up
from .tensors import TensorDesc

DMA_PAD = "DmaPad"
PRODUCER_PAD = "ProducerPad"


@dataclass(frozen=True)
class TransposePlan:
    tensor: str
    block: int
    stage: str
    consumer_kernel: str
    needs_separate_kernel: bool
    element_dma_legal: bool
    l1_staging_bytes: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> TransposePlan:
        return cls(**doc)


@dataclass(frozen=True)
class PadPlan:
    tensor: str
    dims: tuple[int, ...]
    pads: tuple[int, ...]
    mechanism: str
    padded_dims: tuple[int, ...]
    fill: float = 0.0

    @property
    def depad(self) -> tuple[int, ...]:
        """Crop extents restoring the logical shape."""
        return self.dims

    @property
    def num_padded_dims(self) -> int:
        return sum(1 for p in self.pads if p)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tensor": self.tensor,
            "dims": list(self.dims),
            "pads": list(self.pads),
            "mechanism": self.mechanism,
            "padded_dims": list(self.padded_dims),
            "fill": self.fill,
            "depad": list(self.depad),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PadPlan:
        return cls(
            tensor=doc["tensor"],
            dims=tuple(doc["dims"]),
            pads=tuple(doc["pads"]),
            mechanism=doc["mechanism"],
            padded_dims=tuple(doc["padded_dims"]),
            fill=doc.get("fill", 0.0),
        )


def plan_transpose(
    tensor: TensorDesc,
    cfg: NpuConfig,
    gran: KernelGranularity,
    folded: bool,
) -> TransposePlan:
    """Plan a transpose of the trailing two dims of ``tensor``.

    When folded, the block transpose happens on the L2->L1 DMA and the consumer
    becomes a Transposed-MatMul, so no separate kernel and no L1 staging buffer
    are needed. Block transpose is used even when element-granularity DMA would
    be stride-legal.
    """
    tensor_id, dims = tensor.id, tensor.dims
    if len(dims) < 2:
        raise DimensionError(f"{tensor_id}: transpose needs rank >= 2, got {tuple(dims)}")
    gran.check_dma(cfg)
    r, c = dims[-2], dims[-1]
    if r % gran.block or c % gran.block:
        raise MustPadFirstError(
            f"{tensor_id}: trailing dims ({r}, {c}) are not multiples of block {gran.block}; pad first"
        )
    element_legal = cfg.elem_bytes >= cfg.dma_min_stride_bytes
    return TransposePlan(
        tensor=tensor_id,
        block=gran.block,
        stage="L2-DMA",
        consumer_kernel="TransposedMatMul" if folded else "Transpose",
        needs_separate_kernel=not folded,
        element_dma_legal=element_legal,
        l1_staging_bytes=0 if folded else gran.block * gran.block * cfg.elem_bytes,
    )


def _check_blocked(shape: tuple[int, ...], block: int) -> None:
    if len(shape) != 2:
        raise DimensionError(f"expected a 2-D array, got shape {shape}")
    if block < 1 or shape[0] % block or shape[1] % block:
        raise DimensionError(f"shape {shape} is not a multiple of block {block}")


def block_transpose(data: np.ndarray, block: int) -> np.ndarray:
    """Permute block x block tiles into transposed grid positions.

    Output tile (i, j) holds input tile (j, i) with its inner layout untouched.
    """
    data = np.asarray(data)
    _check_blocked(data.shape, block)
    r, c = data.shape
    tiles = data.reshape(r // block, block, c // block, block)
    return np.ascontiguousarray(tiles.transpose(2, 1, 0, 3)).reshape(c, r)


def intra_block_transpose(tile: np.ndarray, block: int | None = None) -> np.ndarray:
    tile = np.asarray(tile)
    if tile.ndim != 2 or tile.shape[0] != tile.shape[1]:
        raise DimensionError(f"tile must be square, got {tile.shape}")
    if block is not None and tile.shape[0] != block:
        raise DimensionError(f"tile edge {tile.shape[0]} != block {block}")
    return np.ascontiguousarray(tile.T)


def finish_block_transpose(blocked: np.ndarray, block: int) -> np.ndarray:
    """Apply the in-register transpose to every tile of a block-transposed array."""
    blocked = np.asarray(blocked)
    _check_blocked(blocked.shape, block)
    r, c = blocked.shape
    tiles = blocked.reshape(r // block, block, c // block, block)
    return np.ascontiguousarray(tiles.transpose(0, 3, 2, 1)).reshape(r, c)


def transposed_matmul(a: np.ndarray, b_blocked: np.ndarray, block: int) -> np.ndarray:
    """``a @ B^T`` where ``b_blocked`` is ``block_transpose(B)``."""
    return a @ finish_block_transpose(b_blocked, block)


def default_granules(role: str, rank: int, gran: KernelGranularity) -> tuple[int, ...]:
    """Per-dim padding granules for a tensor of the given attention role."""
    kg = gran.key_granule
    tail = {
        "Q": (gran.m_min, gran.k_min),
        "K": (kg, gran.k_min),
        "V": (kg, gran.n_min),
        "Bias": (gran.m_min, kg),
        "Mask": (gran.m_min, kg),
        "Output": (gran.m_min, gran.n_min),
    }.get(role, (gran.block, gran.block))
    if rank < 2:
        return tail[-rank:] if rank else ()
    return (1,) * (rank - 2) + tail


def plan_padding(
    tensor: TensorDesc,
    gran: KernelGranularity,
    cfg: NpuConfig,
    producer_can_pad: bool,
    *,
    granules: Sequence[int] | None = None,
    mask_fill: float = -1e9,
) -> PadPlan:
    """Pad each dim to its kernel granule.

    Read-side DMA covers up to ``cfg.dma_pad_dims`` padded dims; beyond that the
    producer must emit padded output, otherwise the tensor is unpaddable.
    """
    tensor_id, dims, role = tensor.id, tensor.dims, tensor.role
    if any(x < 1 for x in dims):
        raise DimensionError(f"{tensor_id}: dims must be >= 1, got {dims}")
    if granules is None:
        granules = default_granules(role, len(dims), gran)
    if len(granules) != len(dims):
        raise DimensionError(f"{tensor_id}: {len(granules)} granules for rank {len(dims)}")
    padded = tuple(round_up(x, g) for x, g in zip(dims, granules))
    pads = tuple(p - x for p, x in zip(padded, dims))
    n = sum(1 for p in pads if p)
    if n <= cfg.dma_pad_dims:
        mechanism = DMA_PAD
    elif producer_can_pad:
        mechanism = PRODUCER_PAD
    else:
        raise UnpaddableError(
            f"{tensor_id}: {n} dims need padding but DMA pads at most {cfg.dma_pad_dims} "
            "and the producer cannot pad"
        )
    fill = mask_fill if role == "Mask" else 0.0
    return PadPlan(tensor_id, dims, pads, mechanism, padded, fill)


def apply_pad(data: np.ndarray, plan: PadPlan) -> np.ndarray:
    data = np.asarray(data)
    if data.shape != plan.dims:
        raise DimensionError(f"{plan.tensor}: expected logical shape {plan.dims}, got {data.shape}")
    if not any(plan.pads):
        return data.copy()
    return np.pad(data, [(0, p) for p in plan.pads], constant_values=plan.fill)


def apply_depad(data: np.ndarray, plan: PadPlan) -> np.ndarray:
    data = np.asarray(data)
    if data.shape != plan.padded_dims:
        raise DimensionError(
            f"{plan.tensor}: expected padded shape {plan.padded_dims}, got {data.shape}"
        )
    return data[tuple(slice(0, x) for x in plan.dims)].copy()


def pad_to(data: np.ndarray, shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Pad trailing edges of ``data`` up to ``shape``."""
    data = np.asarray(data)
    if len(shape) != data.ndim or any(s < x for s, x in zip(shape, data.shape)):
        raise DimensionError(f"cannot pad {data.shape} to {tuple(shape)}")
    return np.pad(data, [(0, s - x) for s, x in zip(shape, data.shape)], constant_values=fill)
