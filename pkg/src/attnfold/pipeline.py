"""Glue between the planners and the simulator: plan, fold, cost, verify, sweep."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .graph import AttentionMatch, Graph, batch_heads, fold_attention, match_attention
from .hw import Settings
from .sim import (
    AttentionInputs,
    Comparison,
    estimate_latency,
    folded_schedule,
    random_inputs,
    reference_attention,
    run_folded,
    run_unfolded,
    unfolded_schedule,
)
from .tensors import TensorDesc
from .tiler import AttentionShape, FoldingPlan, select_tiling, unfolded_utilization, utilization
from .transforms import pad_to, plan_padding, plan_transpose


def plan_block(
    shape: AttentionShape, settings: Settings, *, producer_can_pad: bool = False
) -> FoldingPlan:
    """Pad, tile and plan the K transpose for one logical attention shape."""
    gran, npu = settings.gran, settings.npu
    kg = gran.key_granule
    k_dims, k_gran = ((shape.lk, shape.d), (kg, gran.k_min)) if shape.k_transpose else (
        (shape.d, shape.lk), (gran.k_min, kg))
    tensors = [
        (TensorDesc("Q", (shape.lq, shape.d), "Q"), None),
        (TensorDesc("K", k_dims, "K"), k_gran),
        (TensorDesc("V", (shape.lk, shape.dv), "V"), None),
    ]
    if shape.has_bias:
        tensors.append((TensorDesc("B", (shape.lq, shape.lk), "Bias"), None))
    if shape.has_mask:
        tensors.append((TensorDesc("M", (shape.lq, shape.lk), "Mask"), None))
    tensors.append((TensorDesc("Z", (shape.lq, shape.dv), "Output"), None))
    pads = tuple(
        plan_padding(t, gran, npu, producer_can_pad, granules=gr, mask_fill=settings.mask_fill)
        for t, gr in tensors
    )
    padded = shape.padded(gran)
    plan = select_tiling(padded, gran, npu, buffering=settings.buffering)
    tp = None
    if shape.k_transpose:
        tp = plan_transpose(
            TensorDesc("K", (padded.lk, padded.d), "K"), npu, gran, folded=plan.folding_level >= 2
        )
    return dataclasses.replace(plan, logical=shape, transpose_plan=tp, padding_plans=pads)


def plan_utilization(plan: FoldingPlan, settings: Settings) -> float:
    if plan.folding_level >= 2:
        return utilization(plan, plan.shape, settings.npu)
    return unfolded_utilization(plan.shape, settings.gran, settings.npu)


def cost_plan(plan: FoldingPlan, settings: Settings) -> Comparison:
    """Folded vs unfolded roofline costs for a plan.

    Both mappings run the same kernels on the same cores, so they share the
    plan's utilization; a level-1 plan is the unfolded mapping itself.
    """
    npu = settings.npu
    util = plan_utilization(plan, settings)
    unfolded = estimate_latency(unfolded_schedule(plan.shape, npu), npu, util)
    if plan.folding_level == 1:
        return Comparison(unfolded, unfolded)
    folded = estimate_latency(folded_schedule(plan, npu), npu, util)
    return Comparison(folded, unfolded)


def hash_inputs(inputs: AttentionInputs) -> str:
    h = hashlib.sha256()
    for name in ("q", "k", "v", "bias", "mask"):
        x = getattr(inputs, name)
        h.update(name.encode())
        if x is not None:
            x = np.ascontiguousarray(x, dtype=np.float64)
            h.update(str(x.shape).encode())
            h.update(x.tobytes())
    return h.hexdigest()


def pad_inputs(inputs: AttentionInputs, logical: AttentionShape, padded: AttentionShape, mask_fill: float) -> AttentionInputs:
    n = inputs.normalized(logical)
    H = padded.heads
    out = AttentionInputs(
        pad_to(n.q, (H, padded.lq, padded.d)),
        pad_to(n.k, (padded.kv_heads, padded.lk, padded.d)),
        pad_to(n.v, (padded.kv_heads, padded.lk, padded.dv)),
    )
    if n.bias is not None:
        out.bias = pad_to(n.bias, (H, padded.lq, padded.lk))
    if n.mask is not None:
        out.mask = pad_to(n.mask, (H, padded.lq, padded.lk), fill=mask_fill)
    return out


@dataclass
class Verification:
    input_hash: str
    folded_max_abs_err: float | None
    unfolded_max_abs_err: float
    folded_vs_unfolded: float | None
    folded_output: np.ndarray | None = None
    unfolded_output: np.ndarray | None = None
    reference_output: np.ndarray | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_hash": self.input_hash,
            "folded_max_abs_err": self.folded_max_abs_err,
            "unfolded_max_abs_err": self.unfolded_max_abs_err,
            "folded_vs_unfolded_max_abs": self.folded_vs_unfolded,
        }


def verify_plan(plan: FoldingPlan, settings: Settings, inputs: AttentionInputs) -> Verification:
    """Run both mappings on the same logical inputs and compare to the dense oracle."""
    logical = plan.logical or plan.shape
    padded = plan.shape
    ref = reference_attention(*inputs.expanded(logical))
    pin = pad_inputs(inputs, logical, padded, settings.mask_fill)
    crop = (slice(None), slice(0, logical.lq), slice(0, logical.dv))
    z_u, _ = run_unfolded(padded, settings.npu, pin, key_valid=logical.lk, mask_fill=settings.mask_fill)
    z_u = z_u[crop]
    err_u = float(np.max(np.abs(z_u - ref)))
    z_f = err_f = diff = None
    if plan.folding_level >= 2:
        z_f, _, _ = run_folded(plan, settings.npu, pin, key_valid=logical.lk, mask_fill=settings.mask_fill)
        z_f = z_f[crop]
        err_f = float(np.max(np.abs(z_f - ref)))
        diff = float(np.max(np.abs(z_f - z_u)))
    return Verification(hash_inputs(inputs), err_f, err_u, diff, z_f, z_u, ref)


# ---------------------------------------------------------------------------
# graphs


@dataclass
class BlockResult:
    match: AttentionMatch
    plan: FoldingPlan


@dataclass
class CompileResult:
    graph: Graph
    folded_graph: Graph
    blocks: list[BlockResult]


def compile_graph(g: Graph, settings: Settings, *, producer_can_pad: bool = False) -> CompileResult:
    """match -> batch heads -> plan each block -> fold every block that tiles."""
    blocks = []
    folded = g
    for m in batch_heads(g, match_attention(g)):
        plan = plan_block(m.shape(), settings, producer_can_pad=producer_can_pad)
        blocks.append(BlockResult(m, plan))
        if plan.folding_level >= 2:
            folded = fold_attention(folded, m, plan)
    return CompileResult(g, folded, blocks)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepPoint:
    lq: int
    lk: int
    d: int
    heads: int
    dv: int | None = None
    kv_heads: int | None = None
    mask: bool = False
    bias: bool = False

    def shape(self) -> AttentionShape:
        return AttentionShape(
            heads=self.heads, lq=self.lq, lk=self.lk, d=self.d, dv=self.dv or self.d,
            has_bias=self.bias, has_mask=self.mask, kv_heads=self.kv_heads,
        )


def sweep_row(point: SweepPoint, settings: Settings) -> dict[str, Any]:
    plan = plan_block(point.shape(), settings)
    cmp = cost_plan(plan, settings)
    st = plan.strategy
    return {
        "lq": point.lq,
        "lk": point.lk,
        "d": point.d,
        "dv": point.dv or point.d,
        "heads": point.heads,
        "kv_heads": point.kv_heads or point.heads,
        "mask": point.mask,
        "bias": point.bias,
        "folding_level": plan.folding_level,
        "strategy": st.mode if st else None,
        "utilization": cmp.folded.utilization,
        "folded_latency_s": cmp.folded.latency,
        "unfolded_latency_s": cmp.unfolded.latency,
        "folded_dram_bytes": cmp.folded.dram_bytes,
        "unfolded_dram_bytes": cmp.unfolded.dram_bytes,
        "folded_bound": cmp.folded.bound,
        "unfolded_bound": cmp.unfolded.bound,
        "speedup": cmp.speedup,
    }


def emit_shape_sweep(points: Sequence[SweepPoint], settings: Settings) -> list[dict[str, Any]]:
    if not points:
        raise ValueError("empty sweep range")
    return [sweep_row(p, settings) for p in points]


def parse_range(text: str) -> list[int]:
    """``64`` | ``64..4096`` (doubling) | ``64..512+64`` (step) | ``64:96:128`` (list)."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            step = None
            if "+" in hi:
                hi, step = hi.split("+", 1)
            lo, hi = int(lo), int(hi)
            if lo < 1 or hi < lo:
                raise ValueError
            if step is None:
                out, x = [], lo
                while x <= hi:
                    out.append(x)
                    x *= 2
                return out
            step = int(step)
            if step < 1:
                raise ValueError
            return list(range(lo, hi + 1, step))
        vals = [int(v) for v in text.split(":")]
        if any(v < 1 for v in vals):
            raise ValueError
        return vals
    except ValueError:
        raise ValueError(f"bad range {text!r}") from None


_SWEEP_KEYS = {"lq", "lk", "d", "heads", "dv", "kv_heads", "mask", "bias"}


def parse_sweep(text: str) -> list[SweepPoint]:
    """Parse ``lq=..,lk=..,d=..,heads=..`` into the cartesian product of points."""
    fields: dict[str, list[int]] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValueError(f"sweep term {part!r} is not key=value")
        key, val = part.split("=", 1)
        key = key.strip().lower()
        if key not in _SWEEP_KEYS:
            raise ValueError(f"unknown sweep key {key!r}")
        if key in ("mask", "bias"):
            fields[key] = [int(val.strip().lower() in ("1", "true", "yes"))]
        else:
            fields[key] = parse_range(val)
    for req in ("lq", "lk", "d", "heads"):
        if req not in fields:
            raise ValueError(f"sweep needs {req}=")
    keys = sorted(fields)
    points = []
    for combo in _product([fields[k] for k in keys]):
        kw = dict(zip(keys, combo))
        kw["mask"] = bool(kw.get("mask", 0))
        kw["bias"] = bool(kw.get("bias", 0))
        points.append(SweepPoint(**kw))
    points.sort(key=lambda p: (p.heads, p.d, p.lq, p.lk, p.dv or 0))
    return points


def _product(lists: Iterable[list[int]]):
    out = [()]
    for xs in lists:
        out = [o + (x,) for o in out for x in xs]
    return out


def input_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def block_inputs(plan: FoldingPlan, seed: int, index: int) -> AttentionInputs:
    return random_inputs(plan.logical or plan.shape, input_seed(seed, index))


# ---------------------------------------------------------------------------
# whole-graph numerics


def graph_inputs(g: Graph, rng: np.random.Generator, mask_drop: float = -1e4) -> dict[str, np.ndarray]:
    """Random values for every graph input; masks get a 0 / ``mask_drop`` pattern.

    The first key column of a mask is never dropped so no row is fully masked.
    """
    out = {}
    for tid in g.inputs:
        t = g.tensor(tid)
        if t.role == "Mask":
            m = np.where(rng.random(t.dims) < 0.3, mask_drop, 0.0)
            m[..., 0] = 0.0
            out[tid] = m
        else:
            out[tid] = rng.standard_normal(t.dims)
    return out


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        x = np.ascontiguousarray(arrays[k], dtype=np.float64)
        h.update(k.encode())
        h.update(str(x.shape).encode())
        h.update(x.tobytes())
    return h.hexdigest()


def graph_max_abs_diff(a: dict[str, np.ndarray], b: dict[str, np.ndarray], outputs: Sequence[str]) -> float:
    return max((float(np.max(np.abs(a[t] - b[t]))) for t in outputs), default=0.0)
