import json

import pytest

from stragglersim.cli import main
from stragglersim.model import JobTopology, WorkerId
from stragglersim.synthgen import GenConfig, LaunchDelay, SlowWorker, generate
from stragglersim.traceio import save_trace


@pytest.fixture
def config_path(tmp_path):
    topo = JobTopology(dp_degree=2, pp_degree=2, num_steps=3, microbatches_per_step=4)
    cfg = GenConfig(topo, noise=0.03, seed=30, injections=(SlowWorker(WorkerId(1, 0), 2.0),))
    path = tmp_path / "job.json"
    path.write_text(json.dumps(cfg.to_json_dict()), encoding="utf-8")
    return path


def test_generate_validate_analyze_report_flow(tmp_path, config_path, capsys):
    trace_path = tmp_path / "job.ndtrace.jsonl"
    assert main(["generate", str(config_path), "-o", str(trace_path)]) == 0
    assert trace_path.exists()
    truth_path = tmp_path / "job.ndtrace.jsonl.truth.json"
    truth = json.loads(truth_path.read_text())
    assert truth["slowdown"] > 1.0

    assert main(["validate", str(trace_path)]) == 0
    out = capsys.readouterr().out
    assert "ok:" in out

    report_path = tmp_path / "report.json"
    schedule_path = tmp_path / "sched.csv"
    assert main([
        "analyze", str(trace_path), "-o", str(report_path),
        "--jobs", "1", "--dump-schedule", str(schedule_path),
    ]) == 0
    doc = json.loads(report_path.read_text())
    assert doc["metrics"]["slowdown"] > 1.1
    assert doc["metrics"]["discarded"] is False
    assert "machine-issue" in doc["rootcause"]["labels"]
    header, first = schedule_path.read_text().splitlines()[:2]
    assert header == "op,start,end"
    assert "compute[s0" in first  # canonical key order starts at step 0

    out_dir = tmp_path / "artifacts"
    assert main(["report", str(report_path), "-o", str(out_dir)]) == 0
    assert (out_dir / "index.html").exists()
    assert (out_dir / "heatmap.svg").exists()


def test_analyze_append_csv_accumulates_rows(tmp_path, config_path):
    trace_path = tmp_path / "job.ndtrace.jsonl"
    main(["generate", str(config_path), "-o", str(trace_path)])
    csv_path = tmp_path / "fleet.csv"
    for _ in range(2):
        assert main([
            "analyze", str(trace_path), "-o", str(tmp_path / "r.json"),
            "--jobs", "1", "--append-csv", str(csv_path),
        ]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("trace,t,t_ideal,slowdown,waste,discrepancy")
    assert len(lines) == 3  # header + one row per analyze run
    assert lines[1] == lines[2]


def test_analyze_flags_high_discrepancy_but_exits_zero(tmp_path, capsys):
    topo = JobTopology(dp_degree=2, pp_degree=1, num_steps=3, microbatches_per_step=4)
    base, truth = generate(GenConfig(topo, seed=31))
    tau = truth.jct / 3
    cfg = GenConfig(topo, seed=31, injections=(LaunchDelay(round(0.2 * tau)),))
    trace, _ = generate(cfg)
    trace_path = tmp_path / "late.ndtrace.jsonl"
    save_trace(trace, trace_path)
    report_path = tmp_path / "report.json"
    assert main(["analyze", str(trace_path), "-o", str(report_path), "--jobs", "1"]) == 0
    doc = json.loads(report_path.read_text())
    assert doc["metrics"]["discarded"] is True
    assert "discard" in capsys.readouterr().out


def test_validate_corrupt_file_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.ndtrace.jsonl"
    bad.write_text(
        '{"dp_degree":1,"pp_degree":1,"num_steps":1,"microbatches_per_step":1}\n'
        '{"op":"forward-compute","step":0,"mb":0,"pp":0,"dp":0,"start_us":9,"end_us":2}\n',
        encoding="utf-8",
    )
    assert main(["validate", str(bad)]) == 1
    assert "NegativeDuration" in capsys.readouterr().err


def test_missing_file_exits_one(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nope.jsonl"), "-o", str(tmp_path / "r.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["analyze"])  # missing required arguments
    assert e.value.code == 2


def test_balance_subcommand(tmp_path, capsys):
    batches = tmp_path / "batches.txt"
    batches.write_text("8 7 6 5 4\n10 10 10 10\n", encoding="utf-8")
    assert main(["balance", str(batches), "--dp", "2", "--mb", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    plan = json.loads(lines[0])
    assert sorted(plan["loads"]) == [89, 101]
    assert plan["token_spread"] == max(plan["total_tokens"]) - min(plan["total_tokens"])


def test_balance_rejects_bad_lengths(tmp_path, capsys):
    batches = tmp_path / "batches.txt"
    batches.write_text("8 seven 6\n", encoding="utf-8")
    assert main(["balance", str(batches), "--dp", "2"]) == 1
    assert "integers" in capsys.readouterr().err


def test_dump_graph_outputs_dot(tmp_path, config_path, capsys):
    trace_path = tmp_path / "job.ndtrace.jsonl"
    main(["generate", str(config_path), "-o", str(trace_path)])
    capsys.readouterr()
    assert main(["dump-graph", str(trace_path)]) == 0
    dot = capsys.readouterr().out
    assert dot.startswith("digraph")
    dot_path = tmp_path / "g.dot"
    assert main(["dump-graph", str(trace_path), "-o", str(dot_path)]) == 0
    assert dot_path.read_text().startswith("digraph")


def test_generate_gzip_output(tmp_path, config_path):
    trace_path = tmp_path / "job.ndtrace.jsonl.gz"
    assert main(["generate", str(config_path), "-o", str(trace_path)]) == 0
    assert main(["validate", str(trace_path)]) == 0
