import json
from pathlib import Path

import numpy as np
import pytest

from attnfold import zoo
from attnfold.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, RunRequest, main, run
from attnfold.errors import SimulationError
from attnfold.graph import parse_graph
from attnfold.hw import Settings
from attnfold.pipeline import (
    SweepPoint,
    compile_graph,
    cost_plan,
    graph_inputs,
    graph_max_abs_diff,
    parse_range,
    parse_sweep,
    plan_block,
    sweep_row,
)
from attnfold.sim import run_graph

GRAPHS = Path(__file__).resolve().parents[1] / "graphs"
SHIPPED = sorted(GRAPHS.glob("*.json"))


def test_shipped_graphs_match_zoo():
    assert {p.stem for p in SHIPPED} == set(zoo.GRAPHS)
    for p in SHIPPED:
        assert json.loads(p.read_text()) == zoo.GRAPHS[p.stem]()


@pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
def test_verify_shipped(path, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["--graph", str(path), "--mode", "verify", "--seed", "7", "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["verify"]["passed"] and rep["verify"]["graph_max_abs_err"] < 1e-9
    for b in rep["blocks"]:
        assert b["verify"]["folded_max_abs_err"] < 1e-9


def test_determinism(tmp_path):
    args = ["--graph", str(GRAPHS / "vit_base.json"), "--mode", "compare", "--seed", "3", "--set", "l1_bytes=32768"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(a)]) == 0 and main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_compare_records_shared_input_hash(tmp_path):
    out = tmp_path / "r.json"
    main(["--graph", str(GRAPHS / "bert_base.json"), "--seed", "1", "--out", str(out)])
    (blk,) = json.loads(out.read_text())["blocks"]
    assert blk["folded"]["input_hash"] == blk["unfolded"]["input_hash"]
    assert blk["match"]["variant"] == "MHA" and blk["match"]["has_mask"]
    assert {"plan", "utilization", "speedup"} <= set(blk)
    assert blk["plan"]["padding_plans"] and blk["plan"]["transpose_plan"]["block"] == 8


def test_compare_large_lk(tmp_path):
    out = tmp_path / "r.json"
    assert main(["--graph", str(GRAPHS / "large_batched.json"), "--out", str(out)]) == 0
    (blk,) = json.loads(out.read_text())["blocks"]
    assert blk["speedup"] > 1 and blk["unfolded"]["bound"] == "MemoryBound"


def test_fold_and_unfold_modes(tmp_path):
    out = tmp_path / "f.json"
    main(["--graph", str(GRAPHS / "gqa_decoder.json"), "--mode", "fold", "--out", str(out)])
    rep = json.loads(out.read_text())
    folded = parse_graph(rep["folded_graph"])
    assert [n.kind for n in folded.nodes] == ["FoldedAttention"]
    assert "unfolded" not in rep["blocks"][0]
    main(["--graph", str(GRAPHS / "gqa_decoder.json"), "--mode", "unfold", "--out", str(out)])
    blk = json.loads(out.read_text())["blocks"][0]
    assert "unfolded" in blk and "folded" not in blk


def test_malformed_names_node(tmp_path, capsys):
    doc = zoo.small_single_head()
    doc["nodes"][1]["inputs"][1] = "ghost"
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["--graph", str(p)]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "h0_qk" in err and "ghost" in err


@pytest.mark.parametrize("argv", [
    [],
    ["--graph", "x.json", "--sweep", "lq=8,lk=8,d=8,heads=1"],
    ["--graph", "x.json", "--mode", "verify"],
    ["--graph", "x.json", "--mode", "bogus"],
    ["--graph", "/nonexistent/g.json"],
    ["--sweep", "lq=8"],
    ["--sweep", "lq=9..3,lk=8,d=8,heads=1"],
    ["--graph", "x.json", "--set", "novalue"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_bad_json_and_config(tmp_path):
    p = tmp_path / "g.json"
    p.write_text("{broken")
    assert main(["--graph", str(p)]) == EXIT_USAGE
    assert main(["--graph", str(GRAPHS / "small_single_head.json"), "--set", "unknown=1"]) == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"l1_bytes": 32768}))
    assert main(["--graph", str(GRAPHS / "small_single_head.json"), "--config", str(cfg), "--out", str(tmp_path / "o.json")]) == 0


def test_verify_breach_exit_code(tmp_path):
    req = RunRequest(graph_path=str(GRAPHS / "biased_ragged.json"), mode="verify", seed=0,
                     overrides={"verify_tol": "1e-30"})
    res = run(req)
    assert res.status == EXIT_VERIFY and not res.report["verify"]["passed"]


def test_summary_table(capsys):
    assert main(["--sweep", "lq=64,lk=64..256,d=64,heads=1", "--summary"]) == 0
    out = capsys.readouterr().out
    assert "speedup" in out and out.count("h1 q64") == 3


def test_single_point_sweep_equals_compare(tmp_path):
    rep = run(RunRequest(sweep="lq=64,lk=64,d=64,heads=1")).report
    (row,) = rep["sweep"]
    c = run(RunRequest(graph_path=str(GRAPHS / "small_single_head.json"))).report["blocks"][0]
    assert row["speedup"] == c["speedup"]
    assert row["folded_latency_s"] == c["folded"]["latency"]
    assert row["unfolded_dram_bytes"] == c["unfolded"]["dram_bytes"]


def test_sweep_level1_point():
    rows = run(RunRequest(sweep="lq=8,lk=8,d=8:512,heads=1", overrides={"l1_bytes": "4096"})).report["sweep"]
    by_d = {r["d"]: r for r in rows}
    assert by_d[512]["folding_level"] == 1 and by_d[512]["speedup"] == 1.0
    assert by_d[8]["folding_level"] == 3


def test_parse_range():
    assert parse_range("64..512") == [64, 128, 256, 512]
    assert parse_range("8..32+8") == [8, 16, 24, 32]
    assert parse_range("3:5:9") == [3, 5, 9]
    assert parse_range("7") == [7]
    for bad in ("0", "x", "9..3", "8..16+0"):
        with pytest.raises(ValueError):
            parse_range(bad)


def test_parse_sweep():
    pts = parse_sweep("lq=64,lk=64..128,d=32,heads=2,mask=1")
    assert pts == [SweepPoint(64, 64, 32, 2, mask=True), SweepPoint(64, 128, 32, 2, mask=True)]
    with pytest.raises(ValueError):
        parse_sweep("lq=64,lk=64,d=32")
    with pytest.raises(ValueError):
        parse_sweep("lq=64,lk=64,d=32,heads=1,wat=2")


def test_lk_sweep_trend():
    rows = [sweep_row(SweepPoint(1024, lk, 64, 12), Settings()) for lk in (64, 128, 256, 512, 1024, 2048, 4096)]
    assert all(r["folding_level"] == 3 for r in rows)
    sp = [r["speedup"] for r in rows]
    assert sp == sorted(sp)


# ---- graph interpreter


def test_interpreter_folded_equals_original():
    g = parse_graph(zoo.clip_mixed())
    res = compile_graph(g, Settings())
    x = graph_inputs(g, np.random.default_rng(0))
    ref = run_graph(g, x, Settings().npu)
    got = run_graph(res.folded_graph, x, Settings().npu)
    assert graph_max_abs_diff(ref, got, g.outputs) < 1e-9


def test_interpreter_level2_graph():
    s = Settings(npu=Settings().npu.__class__(l1_bytes=8192))
    g = parse_graph(zoo.per_head_block(2, 64, 64, 128).to_dict())
    res = compile_graph(g, s)
    assert res.blocks[0].plan.folding_level == 2
    assert [n.kind for n in res.folded_graph.nodes] == ["FoldedAttention", "MatMul", "MatMul"]
    x = graph_inputs(g, np.random.default_rng(1))
    assert graph_max_abs_diff(run_graph(g, x, s.npu), run_graph(res.folded_graph, x, s.npu), g.outputs) < 1e-9


def test_interpreter_rejects_opaque():
    g = parse_graph({
        "tensors": [{"id": "a", "dims": [2, 2]}, {"id": "b", "dims": [2, 2]}],
        "nodes": [{"id": "op", "kind": "Opaque", "inputs": ["a"], "outputs": ["b"]}],
    })
    with pytest.raises(SimulationError):
        run_graph(g, {"a": np.zeros((2, 2))}, Settings().npu)
    with pytest.raises(SimulationError):
        run_graph(g, {}, Settings().npu)
