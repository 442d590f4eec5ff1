"""Operator graph IR, attention-chain matching, head batching and folding.

Graphs are read from a small JSON document::

    {"tensors": [{"id": "q", "dims": [64, 32], "role": "Q"}, ...],
     "nodes":   [{"id": "qk", "kind": "MatMul", "inputs": ["q", "kt"],
                  "outputs": ["a"], "attrs": {}}, ...]}

A graph is immutable once built; rewrites return new graphs.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CycleError,
    GraphError,
    HeadGroupingError,
    InconsistentPlanError,
    SchemaError,
    ShapeError,
    UnknownTensorError,
)
from .tensors import ROLES, TensorDesc
from .tiler import AttentionShape, FoldingPlan

KINDS = (
    "MatMul",
    "TransposedMatMul",
    "Add",
    "SoftMax",
    "Transpose",
    "Pad",
    "FoldedAttention",
    "Opaque",
)

MHA, GQA, MQA = "MHA", "GQA", "MQA"

# layouts of the K operand as stored in the graph
K_ROWS = "lk_d"  # (..., Lk, d): needs a transpose before Q*K^T
K_COLS = "d_lk"  # (..., d, Lk): already transposed


class GraphParseError(SchemaError):
    """The document is not JSON at all."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        doc = {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "outputs": list(self.outputs)}
        if self.attrs:
            doc["attrs"] = _plain(self.attrs)
        return doc


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass(frozen=True)
class Graph:
    nodes: tuple[Node, ...]
    tensors: Mapping[str, TensorDesc]

    @cached_property
    def _producers(self) -> dict[str, Node]:
        return {t: n for n in self.nodes for t in n.outputs}

    @cached_property
    def _consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for t in dict.fromkeys(n.inputs):
                out.setdefault(t, []).append(n)
        return out

    @cached_property
    def _by_id(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def tensor(self, tensor_id: str) -> TensorDesc:
        return self.tensors[tensor_id]

    def producer(self, tensor_id: str) -> Node | None:
        return self._producers.get(tensor_id)

    def consumers(self, tensor_id: str) -> list[Node]:
        return self._consumers.get(tensor_id, [])

    @property
    def inputs(self) -> list[str]:
        """Tensors no node produces, in declaration order."""
        return [t for t in self.tensors if t not in self._producers]

    @property
    def outputs(self) -> list[str]:
        """Produced tensors nobody consumes, in node order."""
        return [t for n in self.nodes for t in n.outputs if not self.consumers(t)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "tensors": [
                {"id": t.id, "dims": list(t.dims), "role": t.role} for t in self.tensors.values()
            ],
            "nodes": [n.to_dict() for n in self.nodes],
        }


def serialize_graph(g: Graph) -> str:
    return json.dumps(g.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# parsing and validation


def _require(cond: bool, reason: str, element: str | None = None, exc=SchemaError) -> None:
    if not cond:
        raise exc(reason, element)


def _parse_tensor(doc: Any, idx: int) -> TensorDesc:
    _require(isinstance(doc, Mapping), f"tensors[{idx}] must be an object", f"tensors[{idx}]")
    tid = doc.get("id")
    _require(isinstance(tid, str) and tid != "", f"tensors[{idx}] needs a string 'id'", f"tensors[{idx}]")
    dims = doc.get("dims")
    _require(
        isinstance(dims, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in dims),
        "'dims' must be a list of integers",
        tid,
    )
    _require(all(x >= 1 for x in dims), f"all extents must be >= 1, got {dims}", tid)
    role = doc.get("role", "Other")
    _require(role in ROLES, f"unknown role {role!r}", tid)
    extra = set(doc) - {"id", "dims", "role"}
    _require(not extra, f"unexpected tensor fields {sorted(extra)}", tid)
    return TensorDesc(tid, tuple(dims), role)


def _parse_node(doc: Any, idx: int) -> Node:
    _require(isinstance(doc, Mapping), f"nodes[{idx}] must be an object", f"nodes[{idx}]")
    nid = doc.get("id")
    _require(isinstance(nid, str) and nid != "", f"nodes[{idx}] needs a string 'id'", f"nodes[{idx}]")
    kind = doc.get("kind")
    _require(kind in KINDS, f"unknown node kind {kind!r}", nid)
    for key in ("inputs", "outputs"):
        val = doc.get(key)
        _require(
            isinstance(val, list) and all(isinstance(x, str) for x in val),
            f"'{key}' must be a list of tensor ids",
            nid,
        )
    attrs = doc.get("attrs", {})
    _require(isinstance(attrs, Mapping), "'attrs' must be an object", nid)
    extra = set(doc) - {"id", "kind", "inputs", "outputs", "attrs"}
    _require(not extra, f"unexpected node fields {sorted(extra)}", nid)
    return Node(nid, kind, tuple(doc["inputs"]), tuple(doc["outputs"]), dict(attrs))


def parse_graph(text: str | bytes | Mapping[str, Any]) -> Graph:
    """Parse and validate a JSON graph document (text or already-decoded)."""
    if isinstance(text, Mapping):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"not valid JSON: {exc}") from None
    _require(isinstance(doc, Mapping), "top level must be an object")
    extra = set(doc) - {"tensors", "nodes"}
    _require(not extra, f"unexpected top-level fields {sorted(extra)}")
    _require(isinstance(doc.get("tensors"), list), "'tensors' must be a list")
    _require(isinstance(doc.get("nodes"), list), "'nodes' must be a list")
    tensors = [_parse_tensor(t, i) for i, t in enumerate(doc["tensors"])]
    nodes = [_parse_node(n, i) for i, n in enumerate(doc["nodes"])]
    return build_graph(nodes, tensors)


def build_graph(nodes: Iterable[Node], tensors: Iterable[TensorDesc]) -> Graph:
    """Validate nodes/tensors and return a topologically ordered graph."""
    table: dict[str, TensorDesc] = {}
    for t in tensors:
        _require(t.id not in table, "duplicate tensor id", t.id)
        table[t.id] = t
    nodes = list(nodes)
    seen: set[str] = set()
    producers: dict[str, str] = {}
    for n in nodes:
        _require(n.id not in seen, "duplicate node id", n.id)
        seen.add(n.id)
        for t in n.inputs + n.outputs:
            if t not in table:
                raise UnknownTensorError(f"references undeclared tensor {t!r}", n.id)
        for t in n.outputs:
            if t in producers:
                raise GraphError(f"tensor {t!r} already produced by {producers[t]!r}", n.id)
            producers[t] = n.id
    ordered = _toposort(nodes, producers)
    for n in ordered:
        _check_node(n, table)
    return Graph(tuple(ordered), table)


def _toposort(nodes: list[Node], producers: dict[str, str]) -> list[Node]:
    index = {n.id: i for i, n in enumerate(nodes)}
    deps = {n.id: {producers[t] for t in n.inputs if t in producers} for n in nodes}
    users: dict[str, list[str]] = {n.id: [] for n in nodes}
    for nid, ds in deps.items():
        for d in ds:
            users[d].append(nid)
    pending = {nid: len(ds) for nid, ds in deps.items()}
    ready = [index[nid] for nid, c in pending.items() if c == 0]
    heapq.heapify(ready)
    out: list[Node] = []
    while ready:
        n = nodes[heapq.heappop(ready)]
        out.append(n)
        for u in users[n.id]:
            pending[u] -= 1
            if pending[u] == 0:
                heapq.heappush(ready, index[u])
    if len(out) != len(nodes):
        stuck = sorted((index[nid], nid) for nid, c in pending.items() if c > 0)
        raise CycleError("cycle detected through this node", stuck[0][1])
    return out


def _broadcast(a: Sequence[int], b: Sequence[int], nid: str) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError:
        raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} do not broadcast", nid) from None


def _arity(n: Node, n_in: int | None, n_out: int | None, min_in: int = 0) -> None:
    if n_in is not None and len(n.inputs) != n_in:
        raise ShapeError(f"{n.kind} takes {n_in} inputs, got {len(n.inputs)}", n.id)
    if len(n.inputs) < min_in:
        raise ShapeError(f"{n.kind} takes at least {min_in} inputs, got {len(n.inputs)}", n.id)
    if n_out is not None and len(n.outputs) != n_out:
        raise ShapeError(f"{n.kind} produces {n_out} outputs, got {len(n.outputs)}", n.id)


def matmul_shape(a: Sequence[int], b: Sequence[int], nid: str, transpose_b: bool = False) -> tuple[int, ...]:
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"matmul operands need rank >= 2, got {tuple(a)} and {tuple(b)}", nid)
    m, k = a[-2], a[-1]
    kb, n = (b[-1], b[-2]) if transpose_b else (b[-2], b[-1])
    if k != kb:
        raise ShapeError(f"inner dims differ: {tuple(a)} x {tuple(b)}", nid)
    return _broadcast(a[:-2], b[:-2], nid) + (m, n)


def _expect(n: Node, table: Mapping[str, TensorDesc], out: Sequence[str], dims: tuple[int, ...]) -> None:
    for t in out:
        if table[t].dims != tuple(dims):
            raise ShapeError(f"output {t!r} declared {table[t].dims}, expected {tuple(dims)}", n.id)


def _check_node(n: Node, table: Mapping[str, TensorDesc]) -> None:
    dims = [table[t].dims for t in n.inputs]
    if n.kind in ("MatMul", "TransposedMatMul"):
        _arity(n, 2, 1)
        _expect(n, table, n.outputs, matmul_shape(dims[0], dims[1], n.id, n.kind == "TransposedMatMul"))
    elif n.kind == "Add":
        _arity(n, 2, 1)
        _expect(n, table, n.outputs, _broadcast(dims[0], dims[1], n.id))
    elif n.kind == "SoftMax":
        _arity(n, 1, 1)
        axis = n.attrs.get("axis", -1)
        rank = len(dims[0])
        if not isinstance(axis, int) or not -rank <= axis < rank:
            raise ShapeError(f"softmax axis {axis!r} out of range for rank {rank}", n.id)
        _expect(n, table, n.outputs, dims[0])
    elif n.kind == "Transpose":
        _arity(n, 1, 1)
        perm = _perm(n, len(dims[0]))
        _expect(n, table, n.outputs, tuple(dims[0][p] for p in perm))
    elif n.kind == "Pad":
        _arity(n, 1, 1)
        od = table[n.outputs[0]].dims
        if len(od) != len(dims[0]) or any(o < i for o, i in zip(od, dims[0])):
            raise ShapeError(f"pad output {od} cannot hold input {dims[0]}", n.id)
    elif n.kind == "FoldedAttention":
        _check_folded(n, table)


def _perm(n: Node, rank: int) -> tuple[int, ...]:
    default = tuple(range(rank - 2)) + (rank - 1, rank - 2) if rank >= 2 else tuple(range(rank))
    perm = n.attrs.get("perm", default)
    if sorted(perm) != list(range(rank)):
        raise ShapeError(f"invalid permutation {perm!r} for rank {rank}", n.id)
    return tuple(perm)


def _check_folded(n: Node, table: Mapping[str, TensorDesc]) -> None:
    heads = n.attrs.get("heads")
    level = n.attrs.get("folding_level")
    if level not in (2, 3) or not isinstance(heads, list) or not heads:
        raise ShapeError("FoldedAttention needs folding_level in {2,3} and a non-empty heads list", n.id)
    ins, outs = set(n.inputs), set(n.outputs)
    for h in heads:
        for key in ("q", "k", "v", "bias", "mask"):
            if h.get(key) is not None and h[key] not in ins:
                raise ShapeError(f"head operand {h[key]!r} is not a node input", n.id)
        if h.get("out") not in outs:
            raise ShapeError(f"head output {h.get('out')!r} is not a node output", n.id)
        q, k, v = (table[h[x]].dims for x in ("q", "k", "v"))
        kt = h.get("k_layout", K_ROWS) == K_ROWS
        score = matmul_shape(q, k, n.id, transpose_b=kt)
        for key in ("bias", "mask"):
            if h.get(key) is not None and _broadcast(score, table[h[key]].dims, n.id) != score:
                raise ShapeError(f"{key} {table[h[key]].dims} does not broadcast to {score}", n.id)
        expected = score if level == 2 else matmul_shape(score, v, n.id)
        _expect(n, table, [h["out"]], expected)


# ---------------------------------------------------------------------------
# attention matching


def classify_variant(num_q_heads: int, num_kv_heads: int) -> str:
    if num_kv_heads < 1 or num_q_heads < 1 or num_q_heads % num_kv_heads:
        raise HeadGroupingError(f"{num_q_heads} query heads cannot be grouped over {num_kv_heads} kv heads")
    if num_kv_heads == num_q_heads:
        return MHA
    if num_kv_heads == 1:
        return MQA
    return GQA


@dataclass(frozen=True)
class ChainBinding:
    """One matched Q*K^T -> [Add] -> SoftMax -> *V chain in the graph."""

    q: str
    k: str
    v: str
    z: str
    qk_node: str
    add_nodes: tuple[str, ...]
    softmax_node: str
    pv_node: str
    sm_out: str
    bias: str | None = None
    mask: str | None = None
    k_transpose_node: str | None = None
    k_layout: str = K_ROWS
    num_q_heads: int = 1
    num_kv_heads: int = 1

    @property
    def chain(self) -> tuple[str, ...]:
        return (self.qk_node, *self.add_nodes, self.softmax_node, self.pv_node)

    @property
    def node_ids(self) -> tuple[str, ...]:
        pre = (self.k_transpose_node,) if self.k_transpose_node else ()
        return pre + self.chain


@dataclass(frozen=True)
class AttentionMatch:
    """A (possibly head-batched) attention block.

    ``members`` lists each per-chain binding; ``q``/``k``/``v``/``bias``/``mask``
    mirror the first member.
    """

    members: tuple[ChainBinding, ...]
    num_q_heads: int
    num_kv_heads: int
    variant: str
    lq: int
    lk: int
    d: int
    dv: int
    bias_heads: int = 0
    mask_heads: int = 0

    @property
    def q(self) -> str:
        return self.members[0].q

    @property
    def k(self) -> str:
        return self.members[0].k

    @property
    def v(self) -> str:
        return self.members[0].v

    @property
    def bias(self) -> str | None:
        return self.members[0].bias

    @property
    def mask(self) -> str | None:
        return self.members[0].mask

    @property
    def k_needs_transpose(self) -> bool:
        return self.members[0].k_layout == K_ROWS

    @property
    def chain(self) -> tuple[str, ...]:
        return tuple(nid for m in self.members for nid in m.chain)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(nid for m in self.members for nid in m.node_ids)

    def shape(self) -> AttentionShape:
        """Logical (unpadded) extents of the block."""
        return AttentionShape(
            heads=self.num_q_heads,
            lq=self.lq,
            lk=self.lk,
            d=self.d,
            dv=self.dv,
            has_bias=self.bias is not None,
            has_mask=self.mask is not None,
            kv_heads=self.num_kv_heads,
            bias_heads=self.bias_heads or None,
            mask_heads=self.mask_heads or None,
            k_transpose=self.k_needs_transpose,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "num_q_heads": self.num_q_heads,
            "num_kv_heads": self.num_kv_heads,
            "has_bias": self.bias is not None,
            "has_mask": self.mask is not None,
            "k_needs_transpose": self.k_needs_transpose,
            "chains": len(self.members),
            "lq": self.lq,
            "lk": self.lk,
            "d": self.d,
            "dv": self.dv,
            "nodes": list(self.node_ids),
        }


def _prod(xs: Iterable[int]) -> int:
    return math.prod(xs)


def _bind_addends(g: Graph, score: tuple[int, ...], ops: list[str]) -> tuple[str | None, str | None] | None:
    """Decide which Add operand is the bias and which the mask.

    Declared roles win. Otherwise an operand with the full score shape is the
    mask and a broadcast one is the bias; if that does not separate two
    operands, the first Add carries the bias.
    """
    if not ops:
        return None, None
    roles: list[str | None] = [g.tensor(t).role if g.tensor(t).role in ("Bias", "Mask") else None for t in ops]
    guess = ["Mask" if g.tensor(t).dims == score else "Bias" for t in ops]
    if len(ops) == 1:
        role = roles[0] or guess[0]
        return (ops[0], None) if role == "Bias" else (None, ops[0])
    if roles[0] and roles[1]:
        if roles[0] == roles[1]:
            return None
    elif roles[0] or roles[1]:
        fixed = roles[0] or roles[1]
        other = "Mask" if fixed == "Bias" else "Bias"
        roles = [r or other for r in roles]
    elif guess[0] != guess[1]:
        roles = guess
    else:
        roles = ["Bias", "Mask"]
    bias = ops[roles.index("Bias")]
    mask = ops[roles.index("Mask")]
    return bias, mask


def _single_consumer(g: Graph, t: str) -> Node | None:
    cs = g.consumers(t)
    return cs[0] if len(cs) == 1 else None


def _try_match(g: Graph, qk: Node) -> ChainBinding | None:
    q, k_in = qk.inputs
    if q == k_in:
        return None
    k, k_node, layout = k_in, None, K_COLS
    if qk.kind == "TransposedMatMul":
        layout = K_ROWS
    else:
        prod = g.producer(k_in)
        rank = g.tensor(k_in).rank
        swap_last = tuple(range(rank - 2)) + (rank - 1, rank - 2)
        if (
            prod is not None
            and prod.kind == "Transpose"
            and _perm(prod, rank) == swap_last
            and len(g.consumers(k_in)) == 1
        ):
            k, k_node, layout = prod.inputs[0], prod.id, K_ROWS

    score = g.tensor(qk.outputs[0]).dims
    cur = qk.outputs[0]
    adds: list[Node] = []
    addends: list[str] = []
    while True:
        c = _single_consumer(g, cur)
        if c is None:
            return None
        if c.kind == "Add" and len(adds) < 2:
            if c.inputs[0] == c.inputs[1]:
                return None
            other = c.inputs[1] if c.inputs[0] == cur else c.inputs[0]
            if g.tensor(c.outputs[0]).dims != score:
                return None
            adds.append(c)
            addends.append(other)
            cur = c.outputs[0]
            continue
        if c.kind == "SoftMax":
            axis = c.attrs.get("axis", -1)
            if axis not in (-1, len(score) - 1):
                return None
            sm = c
            break
        return None

    sm_out = sm.outputs[0]
    pv = _single_consumer(g, sm_out)
    if pv is None or pv.kind != "MatMul" or pv.inputs[0] != sm_out or pv.inputs[1] == sm_out:
        return None
    v = pv.inputs[1]

    qd, kd, vd = g.tensor(q).dims, g.tensor(k).dims, g.tensor(v).dims
    if len(qd) < 2 or len(kd) < 2 or len(vd) < 2:
        return None
    nq, nkv = _prod(qd[:-2]), _prod(kd[:-2])
    if nq % nkv or _prod(vd[:-2]) != nkv:
        return None
    if {q, k, v} & set(addends):
        return None
    binding = _bind_addends(g, score, addends)
    if binding is None:
        return None
    bias, mask = binding
    return ChainBinding(
        q=q,
        k=k,
        v=v,
        z=pv.outputs[0],
        qk_node=qk.id,
        add_nodes=tuple(a.id for a in adds),
        softmax_node=sm.id,
        pv_node=pv.id,
        sm_out=sm_out,
        bias=bias,
        mask=mask,
        k_transpose_node=k_node,
        k_layout=layout,
        num_q_heads=nq,
        num_kv_heads=nkv,
    )


def _chain_dims(g: Graph, b: ChainBinding) -> tuple[int, int, int, int]:
    qd, kd, vd = g.tensor(b.q).dims, g.tensor(b.k).dims, g.tensor(b.v).dims
    lk = kd[-2] if b.k_layout == K_ROWS else kd[-1]
    return qd[-2], lk, qd[-1], vd[-1]


def _score_heads(g: Graph, t: str | None) -> int:
    if t is None:
        return 0
    return _prod(g.tensor(t).dims[:-2])


def _match_from(g: Graph, members: Sequence[ChainBinding]) -> AttentionMatch | None:
    nq = sum(m.num_q_heads for m in members)
    kv: dict[str, int] = {}
    for m in members:
        kv.setdefault(m.k, m.num_kv_heads)
    nkv = sum(kv.values())
    if nq % nkv:
        return None

    def distinct(attr: str) -> int:
        seen = {getattr(m, attr) for m in members}
        if None in seen:
            return 0
        n = sum(_score_heads(g, t) for t in seen)
        # per-chain tensors broadcast over their own heads; never exceed nq
        return n if n and nq % n == 0 else nq

    lq, lk, d, dv = _chain_dims(g, members[0])
    return AttentionMatch(
        members=tuple(members),
        num_q_heads=nq,
        num_kv_heads=nkv,
        variant=classify_variant(nq, nkv),
        lq=lq,
        lk=lk,
        d=d,
        dv=dv,
        bias_heads=distinct("bias"),
        mask_heads=distinct("mask"),
    )


def match_attention(g: Graph) -> list[AttentionMatch]:
    """Find every non-overlapping QK^T -> [Add(B), Add(M)] -> SoftMax -> *V chain.

    Candidates are tried in topological order, so an earlier Q*K^T node wins
    any overlap.
    """
    used: set[str] = set()
    out: list[AttentionMatch] = []
    for n in g.nodes:
        if n.kind not in ("MatMul", "TransposedMatMul") or n.id in used:
            continue
        b = _try_match(g, n)
        if b is None or set(b.node_ids) & used:
            continue
        m = _match_from(g, [b])
        if m is None:
            continue
        used.update(b.node_ids)
        out.append(m)
    return out


def batch_heads(g: Graph, matches: Sequence[AttentionMatch]) -> list[AttentionMatch]:
    """Merge matches with identical per-head shapes and operand structure."""
    groups: dict[tuple, list[ChainBinding]] = {}
    for m in matches:
        head = m.members[0]
        key = (
            m.lq, m.lk, m.d, m.dv,
            m.bias is not None, m.mask is not None,
            head.k_layout,
        )
        groups.setdefault(key, []).extend(m.members)
    out: list[AttentionMatch] = []
    for members in groups.values():
        merged = _match_from(g, members)
        if merged is not None:
            out.append(merged)
        else:
            out.extend(_match_from(g, [b]) for b in members)
    return out


# ---------------------------------------------------------------------------
# folding


def _check_plan(m: AttentionMatch, plan: FoldingPlan) -> None:
    if plan.folding_level < 2:
        raise InconsistentPlanError("cannot fold with a level-1 (unfolded) plan")
    s = plan.shape
    logical = m.shape()
    if s.heads != logical.heads or s.kv_heads != logical.kv_heads:
        raise InconsistentPlanError(
            f"plan heads {s.heads}/{s.kv_heads} != match heads {logical.heads}/{logical.kv_heads}"
        )
    if (s.has_bias, s.has_mask) != (logical.has_bias, logical.has_mask):
        raise InconsistentPlanError("plan and match disagree on bias/mask presence")
    if plan.logical is not None:
        pl = plan.logical
        if (pl.lq, pl.lk, pl.d, pl.dv) != (logical.lq, logical.lk, logical.d, logical.dv):
            raise InconsistentPlanError(
                f"plan logical dims {(pl.lq, pl.lk, pl.d, pl.dv)} != match "
                f"{(logical.lq, logical.lk, logical.d, logical.dv)}"
            )
    if s.lq < logical.lq or s.lk < logical.lk or s.d < logical.d or s.dv < logical.dv:
        raise InconsistentPlanError("plan extents are smaller than the matched tensors")


def fold_attention(g: Graph, m: AttentionMatch, plan: FoldingPlan) -> Graph:
    """Replace a matched block by one FoldedAttention node.

    Level 3 absorbs the whole chain; level 2 keeps each SM*V MatMul and feeds it
    from the folded node. Explicit K transposes are absorbed either way.
    """
    _check_plan(m, plan)
    level = plan.folding_level
    removed: set[str] = set()
    for b in m.members:
        removed.update(b.node_ids)
        if level == 2:
            removed.discard(b.pv_node)
    missing = [nid for nid in removed if nid not in g._by_id]
    if missing:
        raise InconsistentPlanError(f"match refers to nodes not in the graph: {sorted(missing)}")

    ins: list[str] = []
    heads = []
    for b in m.members:
        for t in (b.q, b.k, b.v, b.bias, b.mask):
            if t is not None and t not in ins:
                ins.append(t)
        heads.append(
            {
                "q": b.q,
                "k": b.k,
                "v": b.v,
                "bias": b.bias,
                "mask": b.mask,
                "out": b.z if level == 3 else b.sm_out,
                "k_layout": b.k_layout,
            }
        )
    folded = Node(
        id=f"{m.members[0].qk_node}_folded",
        kind="FoldedAttention",
        inputs=tuple(ins),
        outputs=tuple(h["out"] for h in heads),
        attrs={
            "folding_level": level,
            "variant": m.variant,
            "num_q_heads": m.num_q_heads,
            "num_kv_heads": m.num_kv_heads,
            "k_needs_transpose": m.k_needs_transpose,
            "heads": heads,
            "plan": plan.to_dict(),
        },
    )
    if folded.id in g._by_id and folded.id not in removed:
        raise InconsistentPlanError(f"node id {folded.id!r} already exists")

    nodes: list[Node] = []
    placed = False
    for n in g.nodes:
        if n.id in removed:
            if not placed:
                nodes.append(folded)
                placed = True
            continue
        nodes.append(n)
    referenced = {t for n in nodes for t in n.inputs + n.outputs}
    keep_inputs = set(g.inputs)
    tensors = [t for tid, t in g.tensors.items() if tid in referenced or tid in keep_inputs]
    return build_graph(nodes, tensors)
