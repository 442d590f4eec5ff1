"""Tile-by-tile folded and op-by-op unfolded executors.

Both executors walk the same loops whether or not numbers are attached:
passing ``inputs=None`` yields only the schedule, which is how large shapes
are costed without doing the arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SimulationError
from ..tiler import KV_PINNED, AttentionShape, FoldingPlan
from ..transforms import block_transpose, transposed_matmul
from .reference import SoftmaxPartial, combine_partials, combine_with_output
from .schedule import MemoryModel, Schedule, Step

SOFTMAX_OPS = 5  # per score element: max, sub, exp, add, div
STATS_OPS = 3  # share of SOFTMAX_OPS spent building (max, sum)


@dataclass
class AttentionInputs:
    """Dense operands: q (H, Lq, d), k (Hkv, Lk, d), v (Hkv, Lk, dv).

    ``bias``/``mask`` broadcast to (H, Lq, Lk). 2-D operands are treated as a
    single head.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    bias: np.ndarray | None = None
    mask: np.ndarray | None = None

    def normalized(self, shape: AttentionShape) -> AttentionInputs:
        def heads3(x, h, r, c, name):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            if x.shape != (h, r, c):
                raise SimulationError(f"{name} has shape {x.shape}, expected {(h, r, c)}")
            return x

        H = shape.heads
        out = AttentionInputs(
            heads3(self.q, H, shape.lq, shape.d, "q"),
            heads3(self.k, shape.kv_heads, shape.lk, shape.d, "k"),
            heads3(self.v, shape.kv_heads, shape.lk, shape.dv, "v"),
        )
        for name, present in (("bias", shape.has_bias), ("mask", shape.has_mask)):
            x = getattr(self, name)
            if (x is None) == present:
                raise SimulationError(f"{name} presence disagrees with the shape")
            if x is not None:
                x = np.asarray(x, dtype=np.float64)
                try:
                    x = np.broadcast_to(x, (H, shape.lq, shape.lk))
                except ValueError:
                    raise SimulationError(
                        f"{name} {x.shape} does not broadcast to {(H, shape.lq, shape.lk)}"
                    ) from None
                setattr(out, name, x)
        return out

    def expanded(self, shape: AttentionShape) -> tuple[np.ndarray, ...]:
        """Operands with K/V repeated per query head, for the dense oracle."""
        n = self.normalized(shape)
        g = shape.group
        return n.q, np.repeat(n.k, g, axis=0), np.repeat(n.v, g, axis=0), n.bias, n.mask


def random_inputs(shape: AttentionShape, rng: np.random.Generator) -> AttentionInputs:
    """Seeded operands; masks hold 0 or -1e4 with key 0 always visible."""
    q = rng.standard_normal((shape.heads, shape.lq, shape.d))
    k = rng.standard_normal((shape.kv_heads, shape.lk, shape.d))
    v = rng.standard_normal((shape.kv_heads, shape.lk, shape.dv))
    bias = mask = None
    if shape.has_bias:
        bias = 0.5 * rng.standard_normal((shape.bias_heads, shape.lq, shape.lk))
    if shape.has_mask:
        mask = np.where(rng.random((shape.mask_heads, shape.lq, shape.lk)) < 0.25, -1e4, 0.0)
        mask[..., 0] = 0.0
    return AttentionInputs(q, k, v, bias, mask)


def _slot_head(h: int, heads: int, n: int) -> int:
    return h // (heads // n)


def _key_fill(lk: int, key_valid: int | None, mask_fill: float) -> np.ndarray | None:
    if key_valid is None or key_valid >= lk:
        return None
    fill = np.zeros(lk)
    fill[key_valid:] = mask_fill
    return fill


class _FoldedRun:
    def __init__(self, plan: FoldingPlan, cfg, data: AttentionInputs | None, key_valid, mask_fill):
        if plan.folding_level < 2:
            raise SimulationError("folded execution needs a level 2 or 3 plan")
        self.plan, self.cfg, self.data = plan, cfg, data
        s, sv, st = plan.shape, plan.subvolumes, plan.strategy
        self.s, self.st = s, st
        self.rq, self.rk = sv.rows_q, sv.rows_k
        self.nq, self.nk = plan.num_q_tiles, plan.num_k_tiles
        if self.nq * self.rq != s.lq or self.nk * self.rk != s.lk or sv.d != s.d or sv.dv != s.dv:
            raise SimulationError("subvolumes do not tile the planned shape")
        self.e = cfg.elem_bytes
        self.pinned = st.mode == KV_PINNED
        self.ncols = 1 if self.pinned else st.reduce_cols
        self.adds = int(s.has_bias) + int(s.has_mask)
        self.mem = MemoryModel()
        self.steps: list[Step] = []
        self.fill = _key_fill(s.lk, key_valid, mask_fill)

        tp = plan.transpose_plan if s.k_transpose else None
        self.block = tp.block if tp is not None else None
        self.kblk = None
        if data is not None and tp is not None:
            if self.rk % tp.block or s.d % tp.block:
                raise SimulationError(
                    f"tiles ({self.rk}, {s.d}) are not multiples of transpose block {tp.block}"
                )
            # DMA stage: whole-block permutation while K sits in L2
            self.kblk = [block_transpose(data.k[g], tp.block) for g in range(s.kv_heads)]

    def core(self, h: int, i: int, c: int) -> tuple[int, int]:
        row = i % self.st.q_unroll_rows
        return (row, h % self.st.head_unroll_cols) if self.pinned else (row, c)

    def load_qk(self, step: Step, h: int, i: int, j: int) -> None:
        s, e, rq, rk = self.s, self.e, self.rq, self.rk
        g = h // s.group
        self.mem.load(step, "Q", (h, i), rq * s.d * e)
        self.mem.load(step, "K", (g, j), rk * s.d * e)
        if s.has_bias:
            self.mem.load(step, "B", (_slot_head(h, s.heads, s.bias_heads), i, j), rq * rk * e)
        if s.has_mask:
            self.mem.load(step, "M", (_slot_head(h, s.heads, s.mask_heads), i, j), rq * rk * e)

    def qk_ops(self) -> int:
        return 2 * self.rq * self.rk * self.s.d + self.adds * self.rq * self.rk

    def scores(self, h: int, i: int, j: int) -> np.ndarray:
        d, rq, rk = self.data, self.rq, self.rk
        g = h // self.s.group
        qt = d.q[h, i * rq:(i + 1) * rq]
        ks = slice(j * rk, (j + 1) * rk)
        if self.kblk is not None:
            sc = transposed_matmul(qt, self.kblk[g][:, ks], self.block)
        else:
            sc = qt @ d.k[g, ks].T
        qs = slice(i * rq, (i + 1) * rq)
        if d.bias is not None:
            sc = sc + d.bias[h, qs, ks]
        if d.mask is not None:
            sc = sc + d.mask[h, qs, ks]
        if self.fill is not None:
            sc = sc + self.fill[ks]
        return sc

    def columns(self) -> list[range]:
        return [range(c, self.nk, self.ncols) for c in range(self.ncols)]

    # level 3 --------------------------------------------------------------

    def run_level3(self) -> np.ndarray | None:
        s, e, rq, rk = self.s, self.e, self.rq, self.rk
        data = self.data
        z = np.zeros((s.heads, s.lq, s.dv)) if data is not None else None
        step_ops = self.qk_ops() + SOFTMAX_OPS * rq * rk + 2 * rq * rk * s.dv
        for h in range(s.heads):
            g = h // s.group
            for i in range(self.nq):
                parts = []
                for c, js in enumerate(self.columns()):
                    core = self.core(h, i, c)
                    part = SoftmaxPartial.neutral(rq)
                    acc = np.zeros((rq, s.dv)) if data is not None else None
                    for j in js:
                        step = Step("fused_attention", core, h, (i, j), step_ops)
                        self.load_qk(step, h, i, j)
                        self.mem.load(step, "V", (g, j), rk * s.dv * e)
                        self.mem.local(step, "A", rq * rk * e)
                        self.mem.local(step, "SM", rq * rk * e)
                        self.steps.append(step)
                        if data is not None:
                            sc = self.scores(h, i, j)
                            m = sc.max(axis=-1)
                            p = np.exp(sc - m[:, None])
                            pv = p @ data.v[g, j * rk:(j + 1) * rk]
                            part, acc = combine_with_output(part, acc, SoftmaxPartial(m, p.sum(axis=-1)), pv)
                    parts.append((part, acc))
                part, acc = parts[0]
                home = self.core(h, i, 0)
                for c, (p2, a2) in enumerate(parts[1:], start=1):
                    step = Step("reduce", home, h, (i, c))
                    self.mem.hop(step, (2 * rq + rq * s.dv) * e)
                    self.steps.append(step)
                    if data is not None:
                        part, acc = combine_with_output(part, acc, p2, a2)
                step = Step("store", home, h, (i,))
                self.mem.store(step, "Z", rq * s.dv * e)
                self.steps.append(step)
                if data is not None:
                    z[h, i * rq:(i + 1) * rq] = acc / part.s[:, None]
        return z

    # level 2 --------------------------------------------------------------

    def run_level2(self) -> tuple[np.ndarray | None, np.ndarray | None]:
        s, e, rq, rk = self.s, self.e, self.rq, self.rk
        data = self.data
        probs = np.zeros((s.heads, s.lq, s.lk)) if data is not None else None
        cols = self.columns()
        recompute = self.nk > self.ncols
        stats_ops = self.qk_ops() + (STATS_OPS if recompute else SOFTMAX_OPS) * rq * rk
        emit_ops = self.qk_ops() + (SOFTMAX_OPS - STATS_OPS) * rq * rk if recompute else 0
        for h in range(s.heads):
            for i in range(self.nq):
                parts, kept = [], {}
                for c, js in enumerate(cols):
                    core = self.core(h, i, c)
                    part = SoftmaxPartial.neutral(rq)
                    for j in js:
                        step = Step("softmax_stats", core, h, (i, j), stats_ops)
                        self.load_qk(step, h, i, j)
                        self.mem.local(step, "A", rq * rk * e)
                        self.steps.append(step)
                        if data is not None:
                            sc = self.scores(h, i, j)
                            part = combine_partials(part, SoftmaxPartial.from_scores(sc))
                            if not recompute:
                                kept[j] = sc
                    parts.append(part)
                part = parts[0]
                home = self.core(h, i, 0)
                for c, p2 in enumerate(parts[1:], start=1):
                    step = Step("reduce", home, h, (i, c))
                    # gather to the home column, then broadcast the result back
                    self.mem.hop(step, 2 * 2 * rq * e)
                    self.steps.append(step)
                    if data is not None:
                        part = combine_partials(part, p2)
                for c, js in enumerate(cols):
                    core = self.core(h, i, c)
                    for j in js:
                        step = Step("softmax_emit", core, h, (i, j), emit_ops)
                        if recompute:
                            self.load_qk(step, h, i, j)
                            self.mem.local(step, "A", rq * rk * e)
                        self.mem.store(step, "SM", rq * rk * e)
                        self.steps.append(step)
                        if data is not None:
                            sc = kept[j] if not recompute else self.scores(h, i, j)
                            p = np.exp(sc - part.m[:, None]) / part.s[:, None]
                            probs[h, i * rq:(i + 1) * rq, j * rk:(j + 1) * rk] = p
        return probs, self._sm_v_pass(probs)

    def _sm_v_pass(self, probs: np.ndarray | None) -> np.ndarray | None:
        """The unfused SM*V MatMul kernel that level 2 leaves behind."""
        s, e, rq, rk = self.s, self.e, self.rq, self.rk
        data = self.data
        mem = MemoryModel()
        z = np.zeros((s.heads, s.lq, s.dv)) if data is not None else None
        for h in range(s.heads):
            g = h // s.group
            for i in range(self.nq):
                core = self.core(h, i, 0)
                acc = np.zeros((rq, s.dv)) if data is not None else None
                for j in range(self.nk):
                    step = Step("matmul_pv", core, h, (i, j), 2 * rq * rk * s.dv)
                    mem.load(step, "SM", (h, i, j), rq * rk * e)
                    mem.load(step, "V", (g, j), rk * s.dv * e)
                    self.steps.append(step)
                    if data is not None:
                        acc = acc + probs[h, i * rq:(i + 1) * rq, j * rk:(j + 1) * rk] @ data.v[g, j * rk:(j + 1) * rk]
                step = Step("store", core, h, (i,))
                mem.store(step, "Z", rq * s.dv * e)
                self.steps.append(step)
                if data is not None:
                    z[h, i * rq:(i + 1) * rq] = acc
        return z


def _check_shape(shape: AttentionShape | None, plan: FoldingPlan) -> None:
    if shape is not None and shape != plan.shape:
        raise SimulationError(f"shape {shape} does not match the plan's shape {plan.shape}")


def run_folded(
    plan: FoldingPlan,
    cfg,
    inputs: AttentionInputs | None = None,
    *,
    key_valid: int | None = None,
    mask_fill: float = -1e9,
) -> tuple[np.ndarray | None, np.ndarray | None, Schedule]:
    """Folded execution returning (Z, SM_out or None, schedule)."""
    data = inputs.normalized(plan.shape) if inputs is not None else None
    run = _FoldedRun(plan, cfg, data, key_valid, mask_fill)
    probs = None
    if plan.folding_level == 3:
        z = run.run_level3()
    else:
        probs, z = run.run_level2()
    return z, probs, Schedule(run.steps, plan, kind=f"folded-L{plan.folding_level}")


def execute_folded(
    shape: AttentionShape | None,
    plan: FoldingPlan,
    inputs: AttentionInputs,
    cfg,
    *,
    key_valid: int | None = None,
    mask_fill: float = -1e9,
) -> tuple[np.ndarray, Schedule]:
    """Run the folded schedule on padded operands; returns (Z, schedule).

    ``key_valid`` is the logical key length when the key axis was padded;
    padded key columns receive ``mask_fill`` on the score tile.
    """
    _check_shape(shape, plan)
    z, _, sched = run_folded(plan, cfg, inputs, key_valid=key_valid, mask_fill=mask_fill)
    return z, sched


def folded_schedule(plan: FoldingPlan, cfg) -> Schedule:
    return run_folded(plan, cfg)[2]


def run_unfolded(
    shape: AttentionShape,
    cfg,
    inputs: AttentionInputs | None = None,
    *,
    key_valid: int | None = None,
    mask_fill: float = -1e9,
) -> tuple[np.ndarray | None, Schedule]:
    s, e = shape, cfg.elem_bytes
    data = inputs.normalized(shape) if inputs is not None else None
    steps: list[Step] = []
    H, lq, lk = s.heads, s.lq, s.lk
    score_bytes = lq * lk * e
    fill = _key_fill(lk, key_valid, mask_fill)

    def core(h: int) -> tuple[int, int]:
        return ((h // cfg.cols) % cfg.rows, h % cfg.cols)

    kt = None
    if s.k_transpose:
        mem = MemoryModel()
        for g in range(s.kv_heads):
            step = Step("transpose", core(g), g)
            mem.load(step, "K", (g,), lk * s.d * e)
            mem.store(step, "Kt", lk * s.d * e)
            steps.append(step)
        if data is not None:
            kt = np.ascontiguousarray(np.swapaxes(data.k, -1, -2))

    mem = MemoryModel()
    a = np.zeros((H, lq, lk)) if data is not None else None
    for h in range(H):
        g = h // s.group
        step = Step("matmul_qk", core(h), h, (), 2 * lq * lk * s.d)
        mem.load(step, "Q", (h,), lq * s.d * e)
        mem.load(step, "Kt" if s.k_transpose else "K", (g,), lk * s.d * e)
        mem.store(step, "A", score_bytes)
        steps.append(step)
        if data is not None:
            a[h] = data.q[h] @ (kt[g] if kt is not None else data.k[g].T)

    prev = "A"
    for name, tensor, present, heads_n in (
        ("A_b", "B", s.has_bias, s.bias_heads),
        ("A_m", "M", s.has_mask, s.mask_heads),
    ):
        if not present:
            continue
        mem = MemoryModel()
        for h in range(H):
            step = Step(f"add_{tensor}", core(h), h, (), lq * lk)
            mem.load(step, prev, (h,), score_bytes)
            mem.load(step, tensor, (_slot_head(h, H, heads_n),), score_bytes)
            mem.store(step, name, score_bytes)
            steps.append(step)
        if data is not None:
            a = a + (data.bias if tensor == "B" else data.mask)
        prev = name

    mem = MemoryModel()
    sm = np.zeros((H, lq, lk)) if data is not None else None
    for h in range(H):
        step = Step("softmax", core(h), h, (), SOFTMAX_OPS * lq * lk)
        mem.load(step, prev, (h,), score_bytes)
        mem.store(step, "SM", score_bytes)
        steps.append(step)
        if data is not None:
            x = a[h] + fill if fill is not None else a[h]
            p = np.exp(x - x.max(axis=-1, keepdims=True))
            sm[h] = p / p.sum(axis=-1, keepdims=True)

    mem = MemoryModel()
    z = np.zeros((H, lq, s.dv)) if data is not None else None
    for h in range(H):
        g = h // s.group
        step = Step("matmul_pv", core(h), h, (), 2 * lq * lk * s.dv)
        mem.load(step, "SM", (h,), score_bytes)
        mem.load(step, "V", (g,), lk * s.dv * e)
        mem.store(step, "Z", lq * s.dv * e)
        steps.append(step)
        if data is not None:
            z[h] = sm[h] @ data.v[g]
    return z, Schedule(steps, None, kind="unfolded")


def execute_unfolded(
    shape: AttentionShape,
    inputs: AttentionInputs,
    cfg,
    *,
    key_valid: int | None = None,
    mask_fill: float = -1e9,
) -> tuple[np.ndarray, Schedule]:
    """Every chain op as its own pass, with each intermediate round-tripping DRAM."""
    return run_unfolded(shape, cfg, inputs, key_valid=key_valid, mask_fill=mask_fill)


def unfolded_schedule(shape: AttentionShape, cfg) -> Schedule:
    return run_unfolded(shape, cfg)[1]
