"""Node-by-node evaluation of a graph, including FoldedAttention nodes."""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np

from ..errors import SimulationError
from ..graph import K_COLS, Graph, Node
from ..hw import NpuConfig
from ..tiler import FoldingPlan
from ..transforms import pad_to
from .executors import AttentionInputs, run_folded


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    p = np.exp(x - x.max(axis=axis, keepdims=True))
    return p / p.sum(axis=axis, keepdims=True)


def _folded(node: Node, env: dict[str, np.ndarray], cfg: NpuConfig, mask_fill: float) -> None:
    plan = FoldingPlan.from_dict(node.attrs["plan"])
    for head in node.attrs["heads"]:
        q = env[head["q"]]
        k = env[head["k"]]
        if head.get("k_layout") == K_COLS:
            k = np.swapaxes(k, -1, -2)
        v = env[head["v"]]
        batch = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
        lq, d = q.shape[-2:]
        lk, dv = k.shape[-2], v.shape[-1]
        H = int(np.prod(batch, dtype=int))

        def flat(x, r, c):
            return np.broadcast_to(x, batch + (r, c)).reshape(H, r, c)

        s = plan.shape
        # numerics only: operands are broadcast per query head
        shape = dataclasses.replace(
            s, heads=H, kv_heads=H, bias_heads=H, mask_heads=H,
            has_bias=head.get("bias") is not None, has_mask=head.get("mask") is not None,
        )
        inputs = AttentionInputs(
            pad_to(flat(q, lq, d), (H, s.lq, s.d)),
            pad_to(flat(k, lk, d), (H, s.lk, s.d)),
            pad_to(flat(v, lk, dv), (H, s.lk, s.dv)),
        )
        if shape.has_bias:
            inputs.bias = pad_to(flat(env[head["bias"]], lq, lk), (H, s.lq, s.lk))
        if shape.has_mask:
            inputs.mask = pad_to(flat(env[head["mask"]], lq, lk), (H, s.lq, s.lk), fill=mask_fill)
        z, probs, _ = run_folded(
            dataclasses.replace(plan, shape=shape), cfg, inputs, key_valid=lk, mask_fill=mask_fill
        )
        if plan.folding_level == 3:
            env[head["out"]] = z[:, :lq, :dv].reshape(batch + (lq, dv))
        else:
            env[head["out"]] = probs[:, :lq, :lk].reshape(batch + (lq, lk))


def run_graph(
    g: Graph,
    inputs: Mapping[str, np.ndarray],
    cfg: NpuConfig,
    *,
    mask_fill: float = -1e9,
) -> dict[str, np.ndarray]:
    """Evaluate every node in order; returns all tensor values."""
    env = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    missing = [t for t in g.inputs if t not in env]
    if missing:
        raise SimulationError(f"missing graph inputs: {missing}")
    for n in g.nodes:
        x = [env[t] for t in n.inputs]
        if n.kind == "MatMul":
            out = x[0] @ x[1]
        elif n.kind == "TransposedMatMul":
            out = x[0] @ np.swapaxes(x[1], -1, -2)
        elif n.kind == "Add":
            out = x[0] + x[1]
        elif n.kind == "SoftMax":
            out = _softmax(x[0], n.attrs.get("axis", -1))
        elif n.kind == "Transpose":
            rank = x[0].ndim
            default = list(range(rank - 2)) + [rank - 1, rank - 2]
            out = np.transpose(x[0], n.attrs.get("perm", default))
        elif n.kind == "Pad":
            out = pad_to(x[0], g.tensor(n.outputs[0]).dims, fill=n.attrs.get("value", 0.0))
        elif n.kind == "FoldedAttention":
            _folded(n, env, cfg, mask_fill)
            continue
        else:
            raise SimulationError(f"node {n.id!r}: cannot execute {n.kind} nodes")
        env[n.outputs[0]] = out
    return env
