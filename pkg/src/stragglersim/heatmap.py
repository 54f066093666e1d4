"""Worker-slowdown heatmaps and their SVG rendering.

A heatmap cell is one worker, x-coordinate its DP rank and y-coordinate its
PP rank; color depth encodes the worker's slowdown. Slowdown patterns point
at root causes: one hot cell means a worker problem, a hot last row means
stage imbalance, diffuse warmth that moves across steps means data skew.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import EmptyGrid, NotStraggling
from .metrics import STRAGGLING_THRESHOLD, slowdown
from .model import OpType, Trace, WorkerId
from .whatif import Scenario, ScenarioRunner

_LIGHT = (255, 245, 240)
_DARK = (103, 0, 13)


@dataclass(frozen=True)
class Heatmap:
    """Grid of slowdown ratios indexed [pp_rank][dp_rank]."""

    grid: tuple[tuple[float, ...], ...]
    title: str = "worker slowdown"

    def __post_init__(self):
        if not self.grid or not self.grid[0]:
            raise EmptyGrid("heatmap needs at least one cell")
        if any(len(row) != len(self.grid[0]) for row in self.grid):
            raise ValueError("ragged heatmap grid")
        if any(v < 0 for row in self.grid for v in row):
            raise ValueError("slowdown ratios must be non-negative")

    @property
    def pp_degree(self) -> int:
        return len(self.grid)

    @property
    def dp_degree(self) -> int:
        return len(self.grid[0])

    @property
    def vmax(self) -> float:
        return max(v for row in self.grid for v in row)

    def to_json(self) -> list[list[float]]:
        return [list(row) for row in self.grid]


def from_worker_slowdowns(slowdowns: Mapping[WorkerId, float], title: str = "worker slowdown") -> Heatmap:
    if not slowdowns:
        raise EmptyGrid("no worker slowdowns")
    pp = 1 + max(w.pp_rank for w in slowdowns)
    dp = 1 + max(w.dp_rank for w in slowdowns)
    grid = tuple(
        tuple(slowdowns.get(WorkerId(p, d), 0.0) for d in range(dp)) for p in range(pp)
    )
    return Heatmap(grid, title)


def _shade(value: float, vmax: float) -> str:
    """Linear light-to-dark ramp anchored at 1.0 (no slowdown) and vmax."""
    if vmax <= 1.0:
        t = 0.0
    else:
        t = (value - 1.0) / (vmax - 1.0)
        t = min(1.0, max(0.0, t))
    rgb = tuple(round(l + (d - l) * t) for l, d in zip(_LIGHT, _DARK))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_heatmap(heatmap: Heatmap, cell: int = 36) -> str:
    """Deterministic standalone SVG; each cell carries a hover title."""
    pad_left, pad_top, pad = 64, 54, 8
    w = pad_left + heatmap.dp_degree * cell + pad
    h = pad_top + heatmap.pp_degree * cell + 26
    vmax = heatmap.vmax
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">',
        f'<text x="{pad_left}" y="16" font-size="13">{_escape(heatmap.title)}</text>',
        f'<text x="{pad_left}" y="32" fill="#666">scale 1.00 (light) to {vmax:.2f} (dark)</text>',
        f'<text x="{pad_left}" y="{pad_top - 6}" fill="#333">DP rank &#8594;</text>',
    ]
    for p, row in enumerate(heatmap.grid):
        y = pad_top + p * cell
        out.append(f'<text x="8" y="{y + cell // 2 + 4}" fill="#333">pp {p}</text>')
        for d, v in enumerate(row):
            x = pad_left + d * cell
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell - 2}" height="{cell - 2}" '
                f'fill="{_shade(v, vmax)}" stroke="#ccc">'
                f"<title>pp={p} dp={d} slowdown={v:.4f}</title></rect>"
            )
    for d in range(heatmap.dp_degree):
        x = pad_left + d * cell
        out.append(f'<text x="{x + 4}" y="{h - 10}" fill="#333">{d}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ratio(num: float, den: float) -> float:
    if den <= 0:
        return 1.0 if num <= 0 else float("inf")
    return num / den


def per_step_heatmaps(
    trace: Trace,
    graph=None,
    runner: ScenarioRunner | None = None,
    threshold: float = STRAGGLING_THRESHOLD,
) -> list[Heatmap]:
    """Worker slowdowns recomputed per step from the rank scenario sweeps.

    Uses each rank scenario's per-step simulated durations instead of the
    whole-job totals, so transient stragglers surface in the step where they
    happened. Persistent problems yield near-identical grids.
    """
    if runner is None:
        runner = ScenarioRunner(trace, graph)
    topo = trace.topology
    s = slowdown(runner.jct(Scenario.original()), runner.jct(Scenario.fix_all()))
    if s < threshold:
        raise NotStraggling(f"slowdown {s:.4f} below threshold {threshold}")
    ideal = runner.spans(Scenario.fix_all())
    s_pp = [runner.spans(Scenario.fix_all_except_pp_rank(p)) for p in range(topo.pp_degree)]
    s_dp = [runner.spans(Scenario.fix_all_except_dp_rank(d)) for d in range(topo.dp_degree)]
    maps = []
    for i in range(topo.num_steps):
        grid = tuple(
            tuple(
                min(_ratio(s_pp[p][i], ideal[i]), _ratio(s_dp[d][i], ideal[i]))
                for d in range(topo.dp_degree)
            )
            for p in range(topo.pp_degree)
        )
        maps.append(Heatmap(grid, f"per-step worker slowdown, step {i}"))
    return maps


def wallclock_step_heatmaps(trace: Trace) -> list[Heatmap]:
    """Per-step compute activity spans from raw timestamps, per worker.

    Complements the simulated per-step view: launch stalls the simulator
    cannot model (GC pauses, slow data loading) inflate the stalled worker's
    wall-clock compute span in exactly the affected step. Each worker's spans
    are normalized by that worker's median span across steps, so transient
    stalls stand out while persistent slowness (the simulated heatmap's job)
    stays flat.
    """
    topo = trace.topology
    n = topo.num_steps
    max_end: dict[WorkerId, list] = {w: [None] * n for w in topo.workers()}
    t0 = None
    for r in trace.records:
        if r.op_type not in (OpType.FORWARD_COMPUTE, OpType.BACKWARD_COMPUTE):
            continue
        ends = max_end[r.worker]
        if ends[r.step] is None or r.end > ends[r.step]:
            ends[r.step] = r.end
        if t0 is None or r.start < t0:
            t0 = r.start
    norm_spans: dict[WorkerId, list[float]] = {}
    for w, ends in max_end.items():
        prev = t0
        spans = []
        for s in range(n):
            spans.append(ends[s] - prev)
            prev = ends[s]
        ordered = sorted(spans)
        median = ordered[(n - 1) // 2]
        norm_spans[w] = [_ratio(v, median) for v in spans]
    return [
        Heatmap(
            tuple(
                tuple(norm_spans[WorkerId(p, d)][s] for d in range(topo.dp_degree))
                for p in range(topo.pp_degree)
            ),
            f"wall-clock compute span vs worker median, step {s}",
        )
        for s in range(n)
    ]


def cdf_points(values: Sequence[float]) -> list[tuple[float, float]]:
    """(value, cumulative fraction) pairs, non-decreasing in both columns."""
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]
