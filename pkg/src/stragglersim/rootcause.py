"""Root-cause detectors: slow workers, last-stage imbalance, sequence skew.

Worker attribution would need DP-degree x PP-degree simulations if done per
worker; instead, whole-rank scenarios are simulated (DP degree + PP degree
runs) and each worker is assigned the minimum of its two rank slowdowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import InsufficientSamples, NotStraggling
from .metrics import STRAGGLING_THRESHOLD, attribution, slowdown
from .model import OpType, Trace, WorkerId
from .whatif import Scenario, ScenarioRunner

LABEL_MACHINE = "machine-issue"
LABEL_STAGE = "stage-imbalance"
LABEL_SEQLEN = "seqlen-imbalance"
LABEL_NONE = "unclassified"

MACHINE_ISSUE_THRESHOLD = 0.5  # machine issue when M_W exceeds this
STAGE_IMBALANCE_THRESHOLD = 0.5  # stage imbalance when M_S reaches this
FB_CORRELATION_THRESHOLD = 0.9  # sequence skew when forward/backward r reaches this
TOP_WORKER_FRACTION = 0.03


def approx_worker_slowdowns(runner: ScenarioRunner) -> dict[WorkerId, float]:
    """Per-worker slowdown via the rank-level approximation.

    Runs fix-all-except-dp-rank(d) for every d and fix-all-except-pp-rank(p)
    for every p; worker (p, d) gets min(S_p, S_d). Exactly
    dp_degree + pp_degree sweep simulations are issued.
    """
    topo = runner.trace.topology
    t_ideal = runner.jct(Scenario.fix_all())
    before = runner.sim_count
    s_pp = [slowdown(runner.jct(Scenario.fix_all_except_pp_rank(p)), t_ideal) for p in range(topo.pp_degree)]
    s_dp = [slowdown(runner.jct(Scenario.fix_all_except_dp_rank(d)), t_ideal) for d in range(topo.dp_degree)]
    sweep_sims = runner.sim_count - before
    assert sweep_sims <= topo.dp_degree + topo.pp_degree, "sweep exceeded rank-scenario budget"
    return {w: min(s_pp[w.pp_rank], s_dp[w.dp_rank]) for w in topo.workers()}


def exact_worker_slowdowns(runner: ScenarioRunner) -> dict[WorkerId, float]:
    """Exhaustive per-worker sweep; costs one simulation per worker."""
    t_ideal = runner.jct(Scenario.fix_all())
    return {
        w: slowdown(runner.jct(Scenario.fix_all_except_worker(w)), t_ideal)
        for w in runner.trace.topology.workers()
    }


def select_top_workers(slowdowns: Mapping[WorkerId, float], fraction: float = TOP_WORKER_FRACTION) -> tuple[WorkerId, ...]:
    """The ceil(fraction * worker count) slowest workers, ties by rank order."""
    count = max(1, math.ceil(fraction * len(slowdowns)))
    ranked = sorted(slowdowns.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(w for w, _ in ranked[:count])


def machine_issue_score(runner: ScenarioRunner, workers: Iterable[WorkerId]) -> float:
    """M_W: fraction of slowdown recovered by fixing only the given workers."""
    t = runner.jct(Scenario.original())
    t_ideal = runner.jct(Scenario.fix_all())
    t_w = runner.jct(Scenario.fix_only_workers(workers))
    return attribution(t, t_w, t_ideal)


def last_stage_score(runner: ScenarioRunner) -> float:
    """M_S: fraction of slowdown recovered by fixing the last pipeline stage.

    Defined as 0 for jobs without pipeline parallelism.
    """
    if runner.trace.topology.pp_degree < 2:
        return 0.0
    t = runner.jct(Scenario.original())
    t_ideal = runner.jct(Scenario.fix_all())
    t_last = runner.jct(Scenario.fix_only_last_stage())
    return attribution(t, t_last, t_ideal)


def fb_correlation(trace: Trace) -> float | None:
    """Pearson correlation between forward and backward compute durations.

    Sequence-length skew slows a microbatch's forward and backward passes by
    proportional amounts, so a high correlation implicates the data. Sampled
    on the second pipeline stage when PP degree >= 3 (avoiding loss and
    embedding layers), else the first. None when either series is constant.
    """
    probe = 1 if trace.topology.pp_degree >= 3 else 0
    fwd: dict[tuple, int] = {}
    bwd: dict[tuple, int] = {}
    for r in trace.records:
        if r.worker.pp_rank != probe:
            continue
        cell = (r.step, r.microbatch, r.worker.dp_rank)
        if r.op_type is OpType.FORWARD_COMPUTE:
            fwd[cell] = r.duration
        elif r.op_type is OpType.BACKWARD_COMPUTE:
            bwd[cell] = r.duration
    cells = sorted(fwd.keys() & bwd.keys())
    if len(cells) < 2:
        raise InsufficientSamples(f"only {len(cells)} forward/backward sample(s) on stage {probe}")
    xs = [fwd[c] for c in cells]
    ys = [bwd[c] for c in cells]
    n = len(cells)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return None
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / math.sqrt(sxx * syy)


@dataclass
class RootCauseReport:
    worker_slowdowns: dict[WorkerId, float]
    top_worker_set: tuple[WorkerId, ...]
    m_w: float
    m_s: float
    fb_correlation: float | None
    labels: frozenset[str]

    def to_json_dict(self) -> dict:
        return {
            "worker_slowdowns": [
                {"pp": w.pp_rank, "dp": w.dp_rank, "slowdown": v}
                for w, v in sorted(self.worker_slowdowns.items())
            ],
            "top_workers": [{"pp": w.pp_rank, "dp": w.dp_rank} for w in self.top_worker_set],
            "m_w": self.m_w,
            "m_s": self.m_s,
            "fb_correlation": self.fb_correlation,
            "labels": sorted(self.labels),
        }


def classify(m_w: float, m_s: float, fb_r: float | None) -> frozenset[str]:
    """Apply the three root-cause predicates.

    Machine issue and stage imbalance may co-exist. The sequence-skew label
    only applies to jobs the first two predicates leave unexplained: a slow
    worker inflates forward and backward durations proportionally too, so an
    unconditioned correlation test would blame the data for machine problems.
    """
    labels = set()
    if m_w > MACHINE_ISSUE_THRESHOLD:
        labels.add(LABEL_MACHINE)
    if m_s >= STAGE_IMBALANCE_THRESHOLD:
        labels.add(LABEL_STAGE)
    if not labels and fb_r is not None and fb_r >= FB_CORRELATION_THRESHOLD:
        labels.add(LABEL_SEQLEN)
    if not labels:
        labels.add(LABEL_NONE)
    return frozenset(labels)


def analyze_root_causes(runner: ScenarioRunner, threshold: float = STRAGGLING_THRESHOLD) -> RootCauseReport:
    """Full root-cause sweep for one straggling job."""
    t = runner.jct(Scenario.original())
    t_ideal = runner.jct(Scenario.fix_all())
    s = slowdown(t, t_ideal)
    if s < threshold or t <= t_ideal:
        raise NotStraggling(f"slowdown {s:.4f} below threshold {threshold}")

    worker_slowdowns = approx_worker_slowdowns(runner)
    top = select_top_workers(worker_slowdowns)
    m_w = machine_issue_score(runner, top)
    m_s = last_stage_score(runner)
    try:
        fb_r = fb_correlation(runner.trace)
    except InsufficientSamples:
        fb_r = None
    labels = classify(m_w, m_s, fb_r)
    return RootCauseReport(worker_slowdowns, top, m_w, m_s, fb_r, labels)
