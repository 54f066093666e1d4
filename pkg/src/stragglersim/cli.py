"""Command-line entry point.

Subcommands: generate, validate, analyze, report, balance, dump-graph.
Exit codes: 0 success, 1 validation/analysis failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .balancer import plan_batch
from .depgraph import build_graph, to_dot
from .errors import StragglerSimError, TraceIOError, ValidationFailed
from .model import Trace, validate
from .pipeline import analyze_trace, render_report_dir
from .synthgen import generate, load_config
from .traceio import load_trace, save_trace


def _setup_logging() -> None:
    level = os.environ.get("STRAGGLER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _cmd_generate(args) -> int:
    config = load_config(args.config)
    trace, truth = generate(config)
    out = Path(args.output)
    save_trace(trace, out)
    truth_path = out.with_name(out.name + ".truth.json")
    truth_path.write_text(json.dumps(truth.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(trace.records)} records) and {truth_path}")
    return 0


def _cmd_validate(args) -> int:
    try:
        trace = load_trace(args.trace)
    except ValidationFailed as e:
        for v in e.violations:
            print(v, file=sys.stderr)
        return 1
    except TraceIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    violations = validate(trace)  # load_trace already validated; belt and braces
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return 1
    t = trace.topology
    print(
        f"ok: {len(trace.records)} records, topology pp={t.pp_degree} dp={t.dp_degree} "
        f"steps={t.num_steps} microbatches={t.microbatches_per_step}"
    )
    return 0


def _cmd_analyze(args) -> int:
    try:
        trace = load_trace(args.trace)
    except TraceIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    report = analyze_trace(trace, threshold=args.threshold, jobs=args.jobs)
    Path(args.output).write_text(report.to_json(), encoding="utf-8")
    if args.append_csv:
        _append_csv_row(report, Path(args.append_csv), args.trace)
    if args.dump_schedule:
        _dump_schedule(trace, Path(args.dump_schedule))
    m = report.metrics
    flag = " [flagged: discard]" if m.discarded else ""
    labels = ",".join(sorted(report.rootcause.labels)) if report.rootcause else "-"
    print(
        f"S={m.s:.4f} waste={m.waste:.2%} discrepancy={m.discrepancy:.2%}{flag} "
        f"labels={labels} -> {args.output}"
    )
    return 0


def _append_csv_row(report, path: Path, trace_name: str) -> None:
    """One row per job, for aggregating slowdown/waste across a fleet."""
    from .metrics import MetricsReport

    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if new:
            writer.writerow(("trace",) + MetricsReport.CSV_FIELDS)
        writer.writerow([trace_name] + report.metrics.to_csv_row())


def _dump_schedule(trace: Trace, path: Path) -> None:
    from .whatif import Scenario, ScenarioRunner

    runner = ScenarioRunner(trace, build_graph(trace))
    schedule = runner.run(Scenario.original())
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["op", "start", "end"])
        for key, start, end in schedule.rows():
            writer.writerow([str(key), start, end])


def _cmd_report(args) -> int:
    report_dict = json.loads(Path(args.report).read_text(encoding="utf-8"))
    stamp = None
    if args.stamp:
        import datetime

        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    written = render_report_dir(report_dict, Path(args.output), stamp=stamp)
    print(f"wrote {len(written)} file(s) under {args.output}")
    return 0


def _cmd_balance(args) -> int:
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        with open(args.batches, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    lengths = [int(tok) for tok in line.split()]
                except ValueError:
                    print(f"error: line {line_no}: lengths must be integers", file=sys.stderr)
                    return 1
                plan = plan_batch(lengths, args.dp, args.mb)
                out.write(json.dumps(plan.to_json_dict(), sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _cmd_dump_graph(args) -> int:
    try:
        trace = load_trace(args.trace)
    except TraceIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    dot = to_dot(build_graph(trace))
    if args.output:
        Path(args.output).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stragglersim",
        description="Trace-driven what-if analysis of stragglers in hybrid-parallel training jobs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic trace from a config file")
    p.add_argument("config", help="generator config (.json or .toml)")
    p.add_argument("-o", "--output", required=True, help="output trace path (.ndtrace.jsonl[.gz])")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("validate", help="check a trace file against all invariants")
    p.add_argument("trace")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("analyze", help="full what-if analysis to a JSON report")
    p.add_argument("trace")
    p.add_argument("-o", "--output", required=True, help="report JSON path")
    p.add_argument("--threshold", type=float, default=1.1, help="straggling slowdown threshold")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="parallel scenario simulations (default: available cores)")
    p.add_argument("--dump-schedule", help="also dump the simulated original schedule as CSV")
    p.add_argument("--append-csv", help="append a one-line metrics summary to this CSV file")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="render SVG/CSV/HTML artifacts from a report JSON")
    p.add_argument("report")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--stamp", action="store_true", help="embed a generation timestamp")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("balance", help="plan sequence redistribution across DP ranks")
    p.add_argument("batches", help="file with one batch per line (whitespace-separated lengths)")
    p.add_argument("--dp", type=int, required=True, help="DP degree")
    p.add_argument("--mb", type=int, default=1, help="microbatches per rank")
    p.add_argument("-o", "--output", help="output file (default: stdout)")
    p.set_defaults(func=_cmd_balance)

    p = sub.add_parser("dump-graph", help="export the dependency graph in DOT format")
    p.add_argument("trace")
    p.add_argument("-o", "--output", help="output .dot path (default: stdout)")
    p.set_defaults(func=_cmd_dump_graph)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StragglerSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
