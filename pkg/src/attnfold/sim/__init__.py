"""Numerical executors, dense oracle, schedules and roofline costs."""

from .cost import COMPUTE_BOUND, MEMORY_BOUND, Comparison, CostReport, account_traffic, estimate_latency
from .executors import (
    AttentionInputs,
    execute_folded,
    execute_unfolded,
    folded_schedule,
    random_inputs,
    run_folded,
    run_unfolded,
    unfolded_schedule,
)
from .interpreter import run_graph
from .reference import SoftmaxPartial, combine_partials, reference_attention
from .schedule import Schedule, Step, Transfer

__all__ = [
    "AttentionInputs",
    "COMPUTE_BOUND",
    "Comparison",
    "CostReport",
    "MEMORY_BOUND",
    "Schedule",
    "SoftmaxPartial",
    "Step",
    "Transfer",
    "account_traffic",
    "combine_partials",
    "estimate_latency",
    "execute_folded",
    "execute_unfolded",
    "folded_schedule",
    "random_inputs",
    "reference_attention",
    "run_folded",
    "run_graph",
    "run_unfolded",
    "unfolded_schedule",
]
