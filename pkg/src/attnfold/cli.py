"""Command-line front end.

    attnfold --graph g.json --mode compare --out report.json
    attnfold --sweep lq=64..4096,lk=1024,d=64,heads=12 --summary

Exit codes: 0 ok, 1 usage or parse error, 2 validation error, 3 verify
tolerance exceeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import AttnFoldError, ConfigError
from .graph import GraphParseError, parse_graph, serialize_graph
from .hw import Settings, apply_overrides, load_settings
from .pipeline import (
    compile_graph,
    cost_plan,
    emit_shape_sweep,
    graph_inputs,
    graph_max_abs_diff,
    hash_arrays,
    parse_sweep,
    plan_utilization,
    block_inputs,
    verify_plan,
)
from .sim import run_graph

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2, 3
MODES = ("fold", "unfold", "compare", "verify")


class UsageError(Exception):
    pass


@dataclass
class RunRequest:
    graph_path: str | None = None
    config_path: str | None = None
    mode: str = "compare"
    seed: int | None = None
    out_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    sweep: str | None = None
    summary: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if (self.graph_path is None) == (self.sweep is None):
            raise UsageError("give exactly one of --graph or --sweep")
        if self.mode == "verify" and self.seed is None:
            raise UsageError("--mode verify requires --seed")

    def to_dict(self) -> dict[str, Any]:
        return {
            "graph": self.graph_path,
            "config": self.config_path,
            "mode": self.mode,
            "seed": self.seed,
            "overrides": dict(sorted(self.overrides.items())),
            "sweep": self.sweep,
        }


@dataclass
class RunResult:
    status: int
    report: dict[str, Any] | None
    text: str = ""


def _settings(req: RunRequest) -> Settings:
    return apply_overrides(load_settings(req.config_path), req.overrides)


def _graph_report(req: RunRequest, settings: Settings) -> tuple[dict[str, Any], int]:
    try:
        text = Path(req.graph_path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read graph {req.graph_path!r}: {exc.strerror}") from None
    g = parse_graph(text)
    result = compile_graph(g, settings)
    seed = 0 if req.seed is None else req.seed
    numeric = req.mode in ("compare", "verify")
    tol = settings.verify_tol
    status = EXIT_OK

    blocks = []
    for i, b in enumerate(result.blocks):
        plan = b.plan
        entry: dict[str, Any] = {"index": i, "match": b.match.summary()}
        cmp = cost_plan(plan, settings)
        entry["utilization"] = plan_utilization(plan, settings)
        if req.mode != "unfold":
            entry["plan"] = plan.to_dict()
        if req.mode in ("fold", "compare", "verify"):
            entry["folded"] = cmp.folded.to_dict()
        if req.mode in ("unfold", "compare", "verify"):
            entry["unfolded"] = cmp.unfolded.to_dict()
        if req.mode in ("compare", "verify"):
            entry["speedup"] = cmp.speedup
        if numeric:
            v = verify_plan(plan, settings, block_inputs(plan, seed, i))
            entry["folded"]["input_hash"] = v.input_hash
            entry["unfolded"]["input_hash"] = v.input_hash
            if req.mode == "verify":
                entry["verify"] = v.to_dict()
                errs = [e for e in (v.folded_max_abs_err, v.unfolded_max_abs_err) if e is not None]
                entry["verify"]["passed"] = max(errs) < tol
                if not entry["verify"]["passed"]:
                    status = EXIT_VERIFY
        blocks.append(entry)

    report: dict[str, Any] = {
        "request": req.to_dict(),
        "settings": settings.to_dict(),
        "graph": {
            "nodes": len(g.nodes),
            "folded_nodes": len(result.folded_graph.nodes),
            "blocks": len(blocks),
        },
        "blocks": blocks,
    }
    if req.mode == "fold":
        report["folded_graph"] = json.loads(serialize_graph(result.folded_graph))
    if req.mode == "verify":
        x = graph_inputs(g, np.random.default_rng(seed))
        ref = run_graph(g, x, settings.npu, mask_fill=settings.mask_fill)
        got = run_graph(result.folded_graph, x, settings.npu, mask_fill=settings.mask_fill)
        err = graph_max_abs_diff(ref, got, g.outputs)
        report["verify"] = {
            "input_hash": hash_arrays(x),
            "graph_max_abs_err": err,
            "tolerance": tol,
            "passed": err < tol and status == EXIT_OK,
        }
        if err >= tol:
            status = EXIT_VERIFY
    return report, status


def _sweep_report(req: RunRequest, settings: Settings) -> dict[str, Any]:
    try:
        points = parse_sweep(req.sweep)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return {
        "request": req.to_dict(),
        "settings": settings.to_dict(),
        "sweep": emit_shape_sweep(points, settings),
    }


def summary_table(report: dict[str, Any]) -> str:
    """Plain-text table of per-block or per-point latencies."""
    head = f"{'shape':<28}{'lvl':>4}  {'strategy':<9}{'util':>7}{'folded us':>12}{'unfolded us':>13}{'speedup':>9}  bound(f/u)"
    lines = [head, "-" * len(head)]

    def row(shape, level, strat, util, f, u, sp, bf, bu):
        lines.append(
            f"{shape:<28}{level:>4}  {strat or '-':<9}{util:>7.3f}{f * 1e6:>12.3f}{u * 1e6:>13.3f}{sp:>9.3f}  {bf}/{bu}"
        )

    for r in report.get("sweep", []):
        shape = f"h{r['heads']} q{r['lq']} k{r['lk']} d{r['d']}"
        row(shape, r["folding_level"], r["strategy"], r["utilization"], r["folded_latency_s"],
            r["unfolded_latency_s"], r["speedup"], r["folded_bound"], r["unfolded_bound"])
    for b in report.get("blocks", []):
        m = b["match"]
        if "folded" not in b or "unfolded" not in b:
            continue
        shape = f"h{m['num_q_heads']}/{m['num_kv_heads']} q{m['lq']} k{m['lk']} d{m['d']}"
        plan = b["plan"]
        strat = plan["strategy"]["mode"] if plan.get("strategy") else None
        row(shape, plan["folding_level"], strat, b["utilization"], b["folded"]["latency"],
            b["unfolded"]["latency"], b["speedup"], b["folded"]["bound"], b["unfolded"]["bound"])
    return "\n".join(lines) + "\n"


def run(req: RunRequest) -> RunResult:
    """Execute a request and write its report; never raises for bad input."""
    try:
        settings = _settings(req)
        if req.sweep is not None:
            report, status = _sweep_report(req, settings), EXIT_OK
        else:
            report, status = _graph_report(req, settings)
    except (UsageError, ConfigError, GraphParseError) as exc:
        return RunResult(EXIT_USAGE, None, f"error: {exc}\n")
    except AttnFoldError as exc:
        return RunResult(EXIT_INVALID, None, f"error: {type(exc).__name__}: {exc}\n")
    text = render(report)
    if req.out_path:
        Path(req.out_path).write_text(text)
    msg = "" if req.out_path else text
    if req.summary:
        msg += summary_table(report)
    if status == EXIT_VERIFY:
        msg += f"error: verification exceeded tolerance {settings.verify_tol:g}\n"
    return RunResult(status, report, msg)


def render(report: dict[str, Any]) -> str:
    return json.dumps(report, indent=2) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is our validation code
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnfold", description="Fold attention blocks and compare against the unfolded mapping.")
    p.add_argument("--graph", help="JSON graph file")
    p.add_argument("--config", help="JSON NPU/granularity config (default: XDNA2 profile)")
    p.add_argument("--mode", default="compare", choices=MODES)
    p.add_argument("--seed", type=int, help="RNG seed for numeric runs (required for verify)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--sweep", help="shape sweep, e.g. lq=64..4096,lk=1024,d=64,heads=12")
    p.add_argument("--summary", action="store_true", help="also print a plain-text table")
    return p


def request_from_args(argv: Sequence[str] | None) -> RunRequest:
    args = build_parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return RunRequest(args.graph, args.config, args.mode, args.seed, args.out, overrides, args.sweep, args.summary)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        req = request_from_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    res = run(req)
    stream = sys.stderr if res.status != EXIT_OK and res.report is None else sys.stdout
    stream.write(res.text)
    return res.status


if __name__ == "__main__":
    sys.exit(main())
