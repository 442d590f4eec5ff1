"""Dense attention oracle and the softmax partial-statistics algebra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SimulationError


def reference_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    bias: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """softmax(Q K^T + B + M) V over the last axis, in float64.

    ``q`` is (..., Lq, d), ``k`` is (..., Lk, d), ``v`` is (..., Lk, dv); leading
    dims and ``bias``/``mask`` broadcast the numpy way. The softmax numerator is
    multiplied into V before normalizing.
    """
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise SimulationError("q, k, v must have rank >= 2")
    if q.shape[-1] != k.shape[-1]:
        raise SimulationError(f"q {q.shape} and k {k.shape} disagree on head dim")
    if k.shape[-2] != v.shape[-2]:
        raise SimulationError(f"k {k.shape} and v {v.shape} disagree on key length")
    s = q @ np.swapaxes(k, -1, -2)
    for extra in (bias, mask):
        if extra is not None:
            extra = np.asarray(extra, dtype=np.float64)
            try:
                if np.broadcast_shapes(s.shape, extra.shape) != s.shape:
                    raise ValueError
            except ValueError:
                raise SimulationError(f"operand {extra.shape} does not broadcast to scores {s.shape}") from None
            s = s + extra
    mx = s.max(axis=-1, keepdims=True)
    p = np.exp(s - mx)
    return (p @ v) / p.sum(axis=-1, keepdims=True)


@dataclass
class SoftmaxPartial:
    """Running row max ``m`` and exp-sum ``s`` (relative to ``m``) over the keys seen so far."""

    m: np.ndarray
    s: np.ndarray

    @classmethod
    def neutral(cls, rows: int) -> SoftmaxPartial:
        return cls(np.full(rows, -np.inf), np.zeros(rows))

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> SoftmaxPartial:
        m = scores.max(axis=-1)
        return cls(m, np.exp(scores - m[:, None]).sum(axis=-1))

    def __len__(self) -> int:
        return len(self.m)


def _rescale(m_old: np.ndarray, m_new: np.ndarray) -> np.ndarray:
    # exp(-inf - -inf) is nan; an empty partial contributes nothing
    with np.errstate(invalid="ignore"):
        out = np.exp(m_old - m_new)
    return np.where(np.isneginf(m_old), 0.0, out)


def combine_partials(a: SoftmaxPartial, b: SoftmaxPartial) -> SoftmaxPartial:
    if len(a) != len(b):
        raise SimulationError(f"cannot combine partials over {len(a)} and {len(b)} rows")
    m = np.maximum(a.m, b.m)
    return SoftmaxPartial(m, a.s * _rescale(a.m, m) + b.s * _rescale(b.m, m))


def combine_with_output(
    a: SoftmaxPartial, acc_a: np.ndarray, b: SoftmaxPartial, acc_b: np.ndarray
) -> tuple[SoftmaxPartial, np.ndarray]:
    """Merge two partials together with their unnormalized P*V accumulators."""
    merged = combine_partials(a, b)
    acc = acc_a * _rescale(a.m, merged.m)[:, None] + acc_b * _rescale(b.m, merged.m)[:, None]
    return merged, acc
