"""Slowdown, waste, attribution, and simulation-fidelity metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from .errors import NotStraggling, ZeroIdeal
from .model import Trace, WorkerId
from .whatif import Schedule

log = logging.getLogger(__name__)

# A job straggles when its simulated time exceeds ideal by this ratio.
STRAGGLING_THRESHOLD = 1.1

# Jobs whose simulated original timeline deviates from the actual one by more
# than this fraction are flagged for discard.
DISCREPANCY_LIMIT = 0.05


def slowdown(t: float, t_ideal: float) -> float:
    """Job slowdown: simulated original time over straggler-free time."""
    if t_ideal <= 0:
        raise ZeroIdeal(f"ideal completion time must be positive, got {t_ideal}")
    return t / t_ideal


def waste(s: float) -> float:
    """Fraction of allocated GPU-hours lost to straggling: 1 - 1/S."""
    return 1.0 - 1.0 / s


def optype_slowdown(t_ideal_minus_t: float, t_ideal: float) -> float:
    """Slowdown attributable to one op-type group being left unfixed."""
    if t_ideal <= 0:
        raise ZeroIdeal(f"ideal completion time must be positive, got {t_ideal}")
    return t_ideal_minus_t / t_ideal


class StepSlowdowns(NamedTuple):
    per_step: tuple[float, ...]
    normalized: tuple[float, ...]  # per-step slowdown divided by job slowdown


def per_step_slowdown(schedule_original: Schedule, t_ideal: float, n: int) -> StepSlowdowns:
    """Each step's duration over the ideal per-step duration T_ideal / n."""
    if t_ideal <= 0:
        raise ZeroIdeal(f"ideal completion time must be positive, got {t_ideal}")
    if n < 1:
        raise ValueError("need at least one step")
    ideal_span = t_ideal / n
    per_step = tuple(span / ideal_span for span in schedule_original.step_spans)
    s = slowdown(schedule_original.jct, t_ideal)
    normalized = tuple(v / s for v in per_step)
    return StepSlowdowns(per_step, normalized)


def attribution(t: float, t_fixed_subset: float, t_ideal: float) -> float:
    """Fraction of the job's slowdown removed by fixing only a subset.

    1.0 means fixing the subset recovers everything; 0.0 means nothing.
    Values outside [0, 1] are possible (mean/median interplay) and are
    reported raw, never clipped.
    """
    if t <= t_ideal:
        raise NotStraggling(f"T={t} does not exceed T_ideal={t_ideal}")
    value = (t - t_fixed_subset) / (t - t_ideal)
    if not 0.0 <= value <= 1.0:
        log.warning("attribution %.4f outside [0, 1]; fixing the subset over/undershot the ideal", value)
    return value


def actual_step_spans(trace: Trace) -> tuple[float, ...]:
    """Wall-clock per-step spans from trace timestamps.

    Same definition the simulator uses (max end of step s minus max end of
    step s-1) so that discrepancy isolates modeling error; the first step is
    measured from the earliest recorded start, which is the wall-clock
    analogue of the simulator's time zero.
    """
    n = trace.topology.num_steps
    max_end = [None] * n
    for r in trace.records:
        if max_end[r.step] is None or r.end > max_end[r.step]:
            max_end[r.step] = r.end
    prev = min(r.start for r in trace.records)
    spans = []
    for s in range(n):
        spans.append(max_end[s] - prev)
        prev = max_end[s]
    return tuple(spans)


def discrepancy(schedule_original: Schedule, trace: Trace) -> float:
    """Relative error of the simulated average step time vs the actual one."""
    n = trace.topology.num_steps
    tau_sim = schedule_original.jct / n
    tau_act = sum(actual_step_spans(trace)) / n
    if tau_act == 0:
        return 0.0 if tau_sim == 0 else math.inf
    return abs(tau_sim - tau_act) / tau_act


@dataclass
class MetricsReport:
    """All slowdown/waste metrics for one job.

    Worker-level fields are filled in only for straggling jobs where the
    root-cause sweep ran.
    """

    t: float
    t_ideal: float
    s: float
    waste: float
    discrepancy: float
    discarded: bool
    per_step_slowdown: tuple[float, ...]
    normalized_step_slowdown: tuple[float, ...]
    optype_slowdown: Mapping[str, float] = field(default_factory=dict)
    optype_waste: Mapping[str, float] = field(default_factory=dict)
    worker_slowdowns: Mapping[WorkerId, float] | None = None
    m_w: float | None = None
    m_s: float | None = None

    def to_json_dict(self) -> dict:
        d = {
            "t": self.t,
            "t_ideal": self.t_ideal,
            "slowdown": self.s,
            "waste": self.waste,
            "discrepancy": self.discrepancy,
            "discarded": self.discarded,
            "per_step_slowdown": list(self.per_step_slowdown),
            "normalized_step_slowdown": list(self.normalized_step_slowdown),
            "optype_slowdown": dict(self.optype_slowdown),
            "optype_waste": dict(self.optype_waste),
            "m_w": self.m_w,
            "m_s": self.m_s,
        }
        if self.worker_slowdowns is not None:
            d["worker_slowdowns"] = [
                {"pp": w.pp_rank, "dp": w.dp_rank, "slowdown": v}
                for w, v in sorted(self.worker_slowdowns.items())
            ]
        else:
            d["worker_slowdowns"] = None
        return d

    CSV_FIELDS = ("t", "t_ideal", "slowdown", "waste", "discrepancy", "discarded", "m_w", "m_s")

    def to_csv_row(self) -> list:
        return [self.t, self.t_ideal, self.s, self.waste, self.discrepancy,
                int(self.discarded), self.m_w, self.m_s]
