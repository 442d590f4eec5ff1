"""Example attention graphs in the JSON schema understood by ``parse_graph``.

``python -m attnfold.zoo DIR`` writes every graph below into DIR.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Callable


class _Builder:
    def __init__(self) -> None:
        self.tensors: list[dict[str, Any]] = []
        self.nodes: list[dict[str, Any]] = []

    def tensor(self, tid: str, dims, role: str | None = None) -> str:
        doc: dict[str, Any] = {"id": tid, "dims": list(dims)}
        if role:
            doc["role"] = role
        self.tensors.append(doc)
        return tid

    def node(self, nid: str, kind: str, inputs, outputs, **attrs) -> None:
        doc: dict[str, Any] = {"id": nid, "kind": kind, "inputs": list(inputs), "outputs": list(outputs)}
        if attrs:
            doc["attrs"] = attrs
        self.nodes.append(doc)

    def head(
        self, p: str, q: str, k: str, v: str, lq: int, lk: int, dv: int,
        *, bias: str | None = None, mask: str | None = None, batch=(),
    ) -> str:
        """One Q*K^T [+B] [+M] softmax *V chain with an explicit K transpose."""
        b = tuple(batch)
        d = next(t["dims"][-1] for t in self.tensors if t["id"] == q)
        kt = self.tensor(f"{p}_kt", b + (d, lk))
        self.node(f"{p}_transpose", "Transpose", [k], [kt])
        cur = self.tensor(f"{p}_scores", b + (lq, lk))
        self.node(f"{p}_qk", "MatMul", [q, kt], [cur])
        for name, operand in (("bias", bias), ("mask", mask)):
            if operand is None:
                continue
            nxt = self.tensor(f"{p}_{name}ed", b + (lq, lk))
            self.node(f"{p}_add_{name}", "Add", [cur, operand], [nxt])
            cur = nxt
        sm = self.tensor(f"{p}_probs", b + (lq, lk))
        self.node(f"{p}_softmax", "SoftMax", [cur], [sm], axis=-1)
        z = self.tensor(f"{p}_out", b + (lq, dv), "Output")
        self.node(f"{p}_pv", "MatMul", [sm, v], [z])
        return z

    def to_dict(self) -> dict[str, Any]:
        return {"tensors": self.tensors, "nodes": self.nodes}


def per_head_block(
    heads: int, lq: int, lk: int, d: int, *, dv: int | None = None, kv_heads: int | None = None,
    bias: bool = False, mask: bool = False, prefix: str = "",
    builder: _Builder | None = None,
) -> _Builder:
    """An attention block split into one 2-D chain per query head."""
    g = builder or _Builder()
    dv = dv or d
    kv_heads = kv_heads or heads
    group = heads // kv_heads
    shared_mask = g.tensor(f"{prefix}mask", (lq, lk), "Mask") if mask else None
    ks = [g.tensor(f"{prefix}k{j}", (lk, d), "K") for j in range(kv_heads)]
    vs = [g.tensor(f"{prefix}v{j}", (lk, dv), "V") for j in range(kv_heads)]
    for h in range(heads):
        q = g.tensor(f"{prefix}q{h}", (lq, d), "Q")
        b = g.tensor(f"{prefix}bias{h}", (lq, lk), "Bias") if bias else None
        g.head(f"{prefix}h{h}", q, ks[h // group], vs[h // group], lq, lk, dv, bias=b, mask=shared_mask)
    return g


def batched_block(heads: int, lq: int, lk: int, d: int, *, mask: bool = False) -> _Builder:
    """The same block expressed with a leading head axis instead of per-head chains."""
    g = _Builder()
    q = g.tensor("q", (heads, lq, d), "Q")
    k = g.tensor("k", (heads, lk, d), "K")
    v = g.tensor("v", (heads, lk, d), "V")
    m = g.tensor("mask", (heads, lq, lk), "Mask") if mask else None
    g.head("attn", q, k, v, lq, lk, d, mask=m, batch=(heads,))
    return g


def vit_base() -> dict[str, Any]:
    # 197 tokens (196 patches + class token) is the ragged case
    return per_head_block(12, 197, 197, 64).to_dict()


def bert_base() -> dict[str, Any]:
    return per_head_block(12, 128, 128, 64, mask=True).to_dict()


def clip_mixed() -> dict[str, Any]:
    """Two attention blocks of different shapes in one graph (80 text heads, 12 vision heads)."""
    g = per_head_block(80, 77, 77, 64, mask=True, prefix="txt_")
    per_head_block(12, 50, 50, 64, prefix="img_", builder=g)
    return g.to_dict()


def gqa_decoder() -> dict[str, Any]:
    return per_head_block(8, 64, 512, 64, kv_heads=2, mask=True).to_dict()


def small_single_head() -> dict[str, Any]:
    return per_head_block(1, 64, 64, 64).to_dict()


def large_batched() -> dict[str, Any]:
    return batched_block(12, 1024, 1024, 64).to_dict()


def biased_ragged() -> dict[str, Any]:
    return per_head_block(2, 50, 77, 32, bias=True, mask=True).to_dict()


GRAPHS: dict[str, Callable[[], dict[str, Any]]] = {
    "vit_base": vit_base,
    "bert_base": bert_base,
    "clip_mixed": clip_mixed,
    "gqa_decoder": gqa_decoder,
    "small_single_head": small_single_head,
    "large_batched": large_batched,
    "biased_ragged": biased_ragged,
}


def write_all(directory: str | Path) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fn in GRAPHS.items():
        p = out / f"{name}.json"
        p.write_text(json.dumps(fn(), indent=1) + "\n")
        paths.append(p)
    return paths


if __name__ == "__main__":
    for p in write_all(sys.argv[1] if len(sys.argv) > 1 else "graphs"):
        print(p)
