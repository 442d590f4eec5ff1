"""Independent reimplementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def footprint_oracle(rq, rk, d, dv, level, elem, has_b, has_m, pinned, buffering):
    """Buffer-by-buffer tally of per-core L1 bytes."""
    buffers = {
        "q": (rq * d, buffering if pinned else 1),
        "k": (rk * d, 1 if pinned else buffering),
        "scores": (rq * rk, 1),
        "row_max": (rq, 1),
        "row_sum": (rq, 1),
    }
    if level == 3:
        buffers["v"] = (rk * dv, 1 if pinned else buffering)
        buffers["out"] = (rq * dv, 1)
    if has_b:
        buffers["bias"] = (rq * rk, buffering)
    if has_m:
        buffers["mask"] = (rq * rk, buffering)
    return elem * sum(n * copies for n, copies in buffers.values())


def brute_force_tiling(lq, lk, d, dv, has_b, has_m, l1, elem=2, gran=8, key_gran=8, buffering=2):
    """Return (level, rq, rk) by scanning every candidate at each level."""
    cands = []
    for rq in range(1, lq + 1):
        for rk in range(1, lk + 1):
            if rq % gran or rk % key_gran or lq % rq or lk % rk:
                continue
            cands.append((rq, rk))
    for level in (3, 2):
        feasible = [
            (rq, rk) for rq, rk in cands
            if footprint_oracle(rq, rk, d, dv, level, elem, has_b, has_m, rk == lk, buffering) <= l1
        ]
        if feasible:
            best = max(feasible, key=lambda c: (c[0], c[1], c[1] * dv, -(lq // c[0]) * (lk // c[1])))
            return level, best[0], best[1]
    return 1, None, None


def naive_attention(q, k, v, bias=None, mask=None):
    """Triple-loop softmax(QK^T + B + M) V for one head, in Python floats."""
    lq, d = q.shape
    lk, dv = v.shape
    out = np.zeros((lq, dv))
    for i in range(lq):
        scores = []
        for j in range(lk):
            s = sum(float(q[i, t]) * float(k[j, t]) for t in range(d))
            if bias is not None:
                s += float(bias[i, j])
            if mask is not None:
                s += float(mask[i, j])
            scores.append(s)
        mx = max(scores)
        w = [math.exp(s - mx) for s in scores]
        tot = math.fsum(w)
        for c in range(dv):
            out[i, c] = math.fsum(w[j] * float(v[j, c]) for j in range(lk)) / tot
    return out


def one_pass_bytes(heads, kv_heads, lq, lk, d, dv, bias_heads, mask_heads, elem):
    """Every operand read once and the output written once."""
    n = heads * lq * d + 2 * 0
    n += kv_heads * lk * d + kv_heads * lk * dv
    n += bias_heads * lq * lk + mask_heads * lq * lk
    n += heads * lq * dv
    return n * elem


def unfolded_bytes(heads, kv_heads, lq, lk, d, dv, bias_heads, mask_heads, elem, k_transpose=True):
    """Each standalone op reads its operands from DRAM and writes its result back."""
    score = heads * lq * lk
    n = 0
    if k_transpose:
        n += 2 * kv_heads * lk * d           # K in, K^T out
    n += heads * lq * d + kv_heads * lk * d + score   # Q, K^T in; A out
    for present_heads in (bias_heads, mask_heads):
        if present_heads:
            n += score + present_heads * lq * lk + score
    n += 2 * score                           # softmax in/out
    n += score + kv_heads * lk * dv + heads * lq * dv
    return n * elem
