"""End-to-end analysis of one trace and rendering of its report artifacts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from . import heatmap as hm
from .depgraph import build_graph
from .errors import NotStraggling
from .metrics import (
    DISCREPANCY_LIMIT,
    STRAGGLING_THRESHOLD,
    MetricsReport,
    discrepancy,
    per_step_slowdown,
    slowdown,
    waste,
)
from .model import OPTYPE_GROUPS, Trace
from .rootcause import RootCauseReport, analyze_root_causes
from .whatif import Scenario, ScenarioRunner

SCHEMA_VERSION = 1


@dataclass
class AnalysisReport:
    schema_version: int
    topology: dict
    meta: dict
    metrics: MetricsReport
    rootcause: RootCauseReport | None
    heatmap: hm.Heatmap | None
    per_step_heatmaps: list[hm.Heatmap] | None
    wallclock_heatmaps: list[hm.Heatmap]
    scenario_jcts: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "topology": self.topology,
            "meta": self.meta,
            "metrics": self.metrics.to_json_dict(),
            "rootcause": self.rootcause.to_json_dict() if self.rootcause else None,
            "heatmap": self.heatmap.to_json() if self.heatmap else None,
            "per_step_heatmaps": [h.to_json() for h in self.per_step_heatmaps]
            if self.per_step_heatmaps
            else None,
            "wallclock_heatmaps": [h.to_json() for h in self.wallclock_heatmaps],
            "scenario_jcts": self.scenario_jcts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def analyze_trace(
    trace: Trace, threshold: float = STRAGGLING_THRESHOLD, jobs: int = 1
) -> AnalysisReport:
    """Run the full pipeline: graph, scenario sweep, metrics, root causes."""
    graph = build_graph(trace)
    runner = ScenarioRunner(trace, graph)
    topo = trace.topology

    scenarios = [Scenario.original(), Scenario.fix_all()]
    scenarios += [Scenario.fix_all_except_optype(types) for types in OPTYPE_GROUPS.values()]
    scenarios += [Scenario.fix_all_except_pp_rank(p) for p in range(topo.pp_degree)]
    scenarios += [Scenario.fix_all_except_dp_rank(d) for d in range(topo.dp_degree)]
    runner.prefetch(scenarios, jobs=jobs)

    original = runner.run(Scenario.original())
    t = original.jct
    t_ideal = runner.jct(Scenario.fix_all())
    s = slowdown(t, t_ideal)
    disc = discrepancy(original, trace)
    steps = per_step_slowdown(original, t_ideal, topo.num_steps)

    optype_s = {}
    optype_w = {}
    for name, types in OPTYPE_GROUPS.items():
        s_t = slowdown(runner.jct(Scenario.fix_all_except_optype(types)), t_ideal)
        optype_s[name] = s_t
        optype_w[name] = waste(s_t)

    metrics = MetricsReport(
        t=t,
        t_ideal=t_ideal,
        s=s,
        waste=waste(s),
        discrepancy=disc,
        discarded=disc > DISCREPANCY_LIMIT,
        per_step_slowdown=steps.per_step,
        normalized_step_slowdown=steps.normalized,
        optype_slowdown=optype_s,
        optype_waste=optype_w,
    )

    rootcause = None
    job_heatmap = None
    step_heatmaps = None
    try:
        rootcause = analyze_root_causes(runner, threshold=threshold)
        metrics.worker_slowdowns = rootcause.worker_slowdowns
        metrics.m_w = rootcause.m_w
        metrics.m_s = rootcause.m_s
        job_heatmap = hm.from_worker_slowdowns(rootcause.worker_slowdowns)
        step_heatmaps = hm.per_step_heatmaps(trace, graph, runner=runner, threshold=threshold)
    except NotStraggling:
        pass

    scenario_jcts = {sc.label: runner.jct(sc) for sc in scenarios}
    return AnalysisReport(
        schema_version=SCHEMA_VERSION,
        topology={
            "dp_degree": topo.dp_degree,
            "pp_degree": topo.pp_degree,
            "num_steps": topo.num_steps,
            "microbatches_per_step": topo.microbatches_per_step,
        },
        meta=dict(trace.meta),
        metrics=metrics,
        rootcause=rootcause,
        heatmap=job_heatmap,
        per_step_heatmaps=step_heatmaps,
        wallclock_heatmaps=hm.wallclock_step_heatmaps(trace),
        scenario_jcts=scenario_jcts,
    )


def _write_cdf_csv(path: Path, values, value_name: str) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([value_name, "cdf"])
    for v, p in hm.cdf_points(values):
        writer.writerow([f"{v:.6f}", f"{p:.6f}"])
    path.write_text(buf.getvalue(), encoding="utf-8")


def render_report_dir(report_dict: dict, out_dir: Path, stamp: str | None = None) -> list[Path]:
    """Emit SVG heatmaps, CDF CSVs, and an HTML index from a report document.

    Output is deterministic: no timestamps are embedded unless `stamp` is
    given explicitly.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, content: str):
        p = out_dir / name
        p.write_text(content, encoding="utf-8")
        written.append(p)

    metrics = report_dict["metrics"]
    sections = []

    if report_dict.get("heatmap"):
        grid = hm.Heatmap(tuple(tuple(r) for r in report_dict["heatmap"]), "worker slowdown")
        emit("heatmap.svg", hm.render_heatmap(grid))
        sections.append('<h2>Worker slowdown</h2><img src="heatmap.svg" alt="worker slowdown heatmap">')

    for kind, label in (("per_step_heatmaps", "per-step (simulated)"), ("wallclock_heatmaps", "per-step (wall clock)")):
        grids = report_dict.get(kind)
        if not grids:
            continue
        imgs = []
        for i, g in enumerate(grids):
            name = f"{kind}_{i:03d}.svg"
            emit(name, hm.render_heatmap(hm.Heatmap(tuple(tuple(r) for r in g), f"step {i}")))
            imgs.append(f'<img src="{name}" alt="step {i}">')
        sections.append(f"<h2>{label}</h2>" + "\n".join(imgs))

    if metrics.get("normalized_step_slowdown"):
        p = out_dir / "step_slowdown_cdf.csv"
        _write_cdf_csv(p, metrics["normalized_step_slowdown"], "normalized_step_slowdown")
        written.append(p)
    if metrics.get("worker_slowdowns"):
        p = out_dir / "worker_slowdown_cdf.csv"
        _write_cdf_csv(p, [w["slowdown"] for w in metrics["worker_slowdowns"]], "worker_slowdown")
        written.append(p)

    rc = report_dict.get("rootcause")
    labels = ", ".join(rc["labels"]) if rc else "not straggling (or below threshold)"
    rows = [
        ("simulated JCT", f"{metrics['t']:.0f} us"),
        ("ideal JCT", f"{metrics['t_ideal']:.0f} us"),
        ("slowdown S", f"{metrics['slowdown']:.4f}"),
        ("waste", f"{metrics['waste']:.2%}"),
        ("discrepancy", f"{metrics['discrepancy']:.2%}"),
        ("discarded", str(metrics["discarded"])),
        ("root causes", labels),
    ]
    if rc:
        rows += [("M_W", f"{rc['m_w']:.4f}"), ("M_S", f"{rc['m_s']:.4f}"),
                 ("fb correlation", "n/a" if rc["fb_correlation"] is None else f"{rc['fb_correlation']:.4f}")]
    table = "\n".join(f"<tr><td>{k}</td><td>{v}</td></tr>" for k, v in rows)
    stamp_html = f"<p>generated {stamp}</p>" if stamp else ""
    emit(
        "index.html",
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>straggler report</title></head>\n"
        f"<body><h1>Straggler analysis report</h1>{stamp_html}\n<table>{table}</table>\n"
        + "\n".join(sections)
        + "\n</body></html>\n",
    )
    return written
