"""What-if timeline simulation under straggler-fixing scenarios.

The engine evaluates two rules over the dependency graph:

  * an operation launches once every plain predecessor has ended
    (launch = max of predecessor end times, 0 for sources);
  * a compute op ends at launch + duration, while a communication op ends at
    (max launch across its collective group or P2P pair) + its own
    transfer-duration.

A scenario chooses which tensor cells keep their traced durations; every
other cell is replaced by the tensor-wide idealized value (mean for compute,
lower median for communication).
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .depgraph import DepGraph
from .errors import CycleDetected
from .model import (
    COMM_TYPES,
    COMPUTE_TYPES,
    JobTopology,
    OpDurationTensor,
    OpKey,
    OpType,
    Trace,
    WorkerId,
    cell_domain,
    tensor_from_trace,
)

log = logging.getLogger(__name__)


def transfer_durations(trace: Trace, graph: DepGraph) -> dict[OpType, OpDurationTensor]:
    """Extract the intrinsic data-movement part of each communication op.

    For op o in group G: td(o) = end(o) - max(start(g) for g in G). The
    remainder of the traced duration is blocking time waiting for peers and
    is reproduced by simulation semantics instead of being stored.
    """
    by_key = trace.by_key()
    per_type: dict[OpType, dict[OpKey, float]] = {t: {} for t in COMM_TYPES}
    clamped = 0
    for group in graph.groups:
        max_start = max(by_key[k].start for k in group.members)
        for k in group.members:
            td = by_key[k].end - max_start
            if td < 0:
                clamped += 1
                td = 0
            per_type[k.op][k] = td
    if clamped:
        log.warning("clamped %d negative transfer-duration(s) to 0 (clock skew?)", clamped)
    topo = trace.topology
    return {
        t: OpDurationTensor.from_mapping(topo, t, vals)
        for t, vals in per_type.items()
        if cell_domain(t, topo).size > 0
    }


def idealized_value(tensor: OpDurationTensor) -> float:
    """Mean for compute tensors; lower median for communication tensors.

    Communication straggling is long-tailed and skews the average, so the
    median is used there; the lower median of an even-sized population biases
    toward the faster value.
    """
    flat = tensor.values.ravel()
    if flat.size == 0:
        return 0.0
    if tensor.op_type.is_compute:
        return float(flat.mean())
    return float(np.partition(flat, (flat.size - 1) // 2)[(flat.size - 1) // 2])


def idealize(
    tensor: OpDurationTensor, keep: Callable[[OpKey], bool] | np.ndarray | None
) -> OpDurationTensor:
    """Replace all cells where `keep` is false with the tensor-wide ideal value.

    `keep` may be a predicate over OpKey, a boolean mask of the tensor's
    shape, or None (keep nothing).
    """
    ideal = idealized_value(tensor)
    if keep is None:
        mask = np.zeros(tensor.domain.shape, dtype=bool)
    elif isinstance(keep, np.ndarray):
        if keep.shape != tensor.domain.shape:
            raise ValueError(f"mask shape {keep.shape} does not match tensor {tensor.domain.shape}")
        mask = keep
    else:
        mask = np.zeros(tensor.domain.shape, dtype=bool)
        for key in tensor.domain.keys():
            if keep(key):
                mask[tensor.domain.index_of(key)] = True
    out = np.where(mask, tensor.values, ideal)
    return tensor.with_values(out)


@dataclass(frozen=True)
class Scenario:
    """Which tensor cells keep their original (straggling) durations.

    kind: original | fix-all | fix-all-except-worker | fix-all-except-pp-rank
          | fix-all-except-dp-rank | fix-all-except-optype | fix-only-workers
          | fix-only-pp-rank | fix-only-dp-rank | fix-only-last-stage
    """

    kind: str
    worker: WorkerId | None = None
    workers: frozenset[WorkerId] = frozenset()
    pp_rank: int | None = None
    dp_rank: int | None = None
    op_types: frozenset[OpType] = frozenset()

    @classmethod
    def original(cls):
        return cls("original")

    @classmethod
    def fix_all(cls):
        return cls("fix-all")

    @classmethod
    def fix_all_except_worker(cls, worker: WorkerId):
        return cls("fix-all-except-worker", worker=WorkerId(*worker))

    @classmethod
    def fix_all_except_pp_rank(cls, pp_rank: int):
        return cls("fix-all-except-pp-rank", pp_rank=pp_rank)

    @classmethod
    def fix_all_except_dp_rank(cls, dp_rank: int):
        return cls("fix-all-except-dp-rank", dp_rank=dp_rank)

    @classmethod
    def fix_all_except_optype(cls, op_types: OpType | Sequence[OpType]):
        if isinstance(op_types, OpType):
            op_types = (op_types,)
        return cls("fix-all-except-optype", op_types=frozenset(op_types))

    @classmethod
    def fix_only_workers(cls, workers):
        return cls("fix-only-workers", workers=frozenset(WorkerId(*w) for w in workers))

    @classmethod
    def fix_only_pp_rank(cls, pp_rank: int):
        return cls("fix-only-pp-rank", pp_rank=pp_rank)

    @classmethod
    def fix_only_dp_rank(cls, dp_rank: int):
        return cls("fix-only-dp-rank", dp_rank=dp_rank)

    @classmethod
    def fix_only_last_stage(cls):
        return cls("fix-only-last-stage")

    @property
    def label(self) -> str:
        if self.kind == "fix-all-except-worker":
            return f"fix-all-except-worker(pp={self.worker.pp_rank},dp={self.worker.dp_rank})"
        if self.kind in ("fix-all-except-pp-rank", "fix-only-pp-rank"):
            return f"{self.kind}({self.pp_rank})"
        if self.kind in ("fix-all-except-dp-rank", "fix-only-dp-rank"):
            return f"{self.kind}({self.dp_rank})"
        if self.kind == "fix-all-except-optype":
            return f"fix-all-except-optype({'+'.join(sorted(t.value for t in self.op_types))})"
        if self.kind == "fix-only-workers":
            ws = ",".join(f"(pp={w.pp_rank},dp={w.dp_rank})" for w in sorted(self.workers))
            return f"fix-only-workers[{ws}]"
        return self.kind

    def validate_against(self, topology: JobTopology) -> None:
        P, D = topology.pp_degree, topology.dp_degree
        for w in list(self.workers) + ([self.worker] if self.worker else []):
            if not (0 <= w.pp_rank < P and 0 <= w.dp_rank < D):
                raise ValueError(f"worker {w} outside topology {P}x{D}")
        if self.pp_rank is not None and not 0 <= self.pp_rank < P:
            raise ValueError(f"pp rank {self.pp_rank} outside topology")
        if self.dp_rank is not None and not 0 <= self.dp_rank < D:
            raise ValueError(f"dp rank {self.dp_rank} outside topology")

    def keep_mask(self, tensor: OpDurationTensor, topology: JobTopology) -> np.ndarray:
        """Boolean mask over the tensor's cells: True = keep original value."""
        dom = tensor.domain
        mask = np.zeros(dom.shape, dtype=bool)

        def worker_slice(w: WorkerId):
            if dom.pp_lo <= w.pp_rank < dom.pp_hi:
                mask[:, :, w.pp_rank - dom.pp_lo, w.dp_rank] = True

        kind = self.kind
        if kind == "original":
            mask[:] = True
        elif kind == "fix-all":
            pass
        elif kind == "fix-all-except-worker":
            worker_slice(self.worker)
        elif kind == "fix-all-except-pp-rank":
            if dom.pp_lo <= self.pp_rank < dom.pp_hi:
                mask[:, :, self.pp_rank - dom.pp_lo, :] = True
        elif kind == "fix-all-except-dp-rank":
            mask[:, :, :, self.dp_rank] = True
        elif kind == "fix-all-except-optype":
            if tensor.op_type in self.op_types:
                mask[:] = True
        elif kind == "fix-only-workers":
            mask[:] = True
            for w in self.workers:
                if dom.pp_lo <= w.pp_rank < dom.pp_hi:
                    mask[:, :, w.pp_rank - dom.pp_lo, w.dp_rank] = False
        elif kind == "fix-only-pp-rank":
            mask[:] = True
            if dom.pp_lo <= self.pp_rank < dom.pp_hi:
                mask[:, :, self.pp_rank - dom.pp_lo, :] = False
        elif kind == "fix-only-dp-rank":
            mask[:] = True
            mask[:, :, :, self.dp_rank] = False
        elif kind == "fix-only-last-stage":
            mask[:] = True
            last = topology.pp_degree - 1
            if dom.pp_lo <= last < dom.pp_hi:
                mask[:, :, last - dom.pp_lo, :] = False
        else:
            raise ValueError(f"unknown scenario kind {kind!r}")
        return mask


class Schedule:
    """Simulated timeline: per-op start/end, per-step durations, total JCT."""

    __slots__ = ("graph", "starts", "ends", "step_spans", "jct")

    def __init__(self, graph: DepGraph, starts, ends, step_spans):
        self.graph = graph
        self.starts = starts
        self.ends = ends
        self.step_spans = tuple(step_spans)
        self.jct = sum(self.step_spans)

    def start_of(self, key: OpKey):
        return self.starts[self.graph.index[key]]

    def end_of(self, key: OpKey):
        return self.ends[self.graph.index[key]]

    def rows(self):
        for i, k in enumerate(self.graph.nodes):
            yield k, self.starts[i], self.ends[i]


def simulate(
    graph: DepGraph,
    durations: Mapping[OpKey, float] | Sequence[float],
    launch_delays: Mapping[OpKey, float] | None = None,
) -> Schedule:
    """Event-driven evaluation of the two timing rules.

    `durations` maps every node to its (transfer-)duration, either keyed by
    OpKey or as a sequence aligned with graph.nodes. Ready nodes are
    processed in canonical key order; end times do not depend on that order,
    it only makes internal event traces reproducible.
    """
    n = graph.num_nodes
    nodes = graph.nodes
    if isinstance(durations, Mapping):
        try:
            dur = [durations[k] for k in nodes]
        except KeyError as e:
            raise ValueError(f"duration missing for {e.args[0]}") from None
    else:
        if len(durations) != n:
            raise ValueError("durations sequence length does not match graph")
        dur = list(durations)

    delay = None
    if launch_delays:
        delay = [0] * n
        for k, v in launch_delays.items():
            delay[graph.index[k]] = v

    succs = graph.succs
    group_of = graph.group_of
    groups = graph.groups
    idx = graph.index

    launch_lb = [0] * n  # running max of predecessor end times
    remaining = [len(p) for p in graph.preds]
    launches = [None] * n
    ends: list = [None] * n
    group_pending = [len(g.members) for g in groups]
    group_max = [None] * len(groups)
    group_member_ids = [tuple(idx[m] for m in g.members) for g in groups]

    ready = [i for i in range(n) if remaining[i] == 0]
    heapq.heapify(ready)
    finished = 0

    def finish(i, end):
        nonlocal finished
        ends[i] = end
        finished += 1
        for s in succs[i]:
            if end > launch_lb[s]:
                launch_lb[s] = end
            remaining[s] -= 1
            if remaining[s] == 0:
                heapq.heappush(ready, s)

    while ready:
        i = heapq.heappop(ready)
        t = launch_lb[i]
        if delay is not None:
            t = t + delay[i]
        launches[i] = t
        gid = group_of[i]
        if gid < 0:
            finish(i, t + dur[i])
        else:
            if group_max[gid] is None or t > group_max[gid]:
                group_max[gid] = t
            group_pending[gid] -= 1
            if group_pending[gid] == 0:
                gm = group_max[gid]
                for m in group_member_ids[gid]:
                    finish(m, gm + dur[m])

    if finished < n:
        raise CycleDetected(
            f"simulation deadlocked with {n - finished} unfinished node(s); "
            "a comm group depends on its own completion"
        )

    num_steps = graph.topology.num_steps
    max_end = [0] * num_steps
    node_step = graph.node_step
    for i in range(n):
        s = node_step[i]
        if ends[i] > max_end[s]:
            max_end[s] = ends[i]
    spans = []
    prev = 0
    for s in range(num_steps):
        spans.append(max_end[s] - prev)
        prev = max_end[s]
    return Schedule(graph, tuple(launches), tuple(ends), spans)


def original_tensors(trace: Trace, graph: DepGraph) -> dict[OpType, OpDurationTensor]:
    """Per-type tensors with traced compute durations and extracted
    transfer-durations for communication."""
    tensors = {t: tensor_from_trace(trace, t) for t in COMPUTE_TYPES}
    tensors.update(transfer_durations(trace, graph))
    return tensors


def duration_vector(graph: DepGraph, tensors: Mapping[OpType, OpDurationTensor]) -> list[float]:
    """Flatten tensors into a per-node duration list aligned with graph.nodes."""
    out = [0.0] * graph.num_nodes
    nodes = graph.nodes
    per_type: dict[OpType, tuple[list[int], list[tuple]]] = {}
    for i, k in enumerate(nodes):
        ids, cells = per_type.setdefault(k.op, ([], []))
        ids.append(i)
        cells.append((k.step, k.mb, k.pp, k.dp))
    for op_type, (ids, cells) in per_type.items():
        tensor = tensors[op_type]
        dom = tensor.domain
        s, m, p, d = zip(*cells)
        vals = tensor.values[
            np.asarray(s), np.asarray(m), np.asarray(p) - dom.pp_lo, np.asarray(d)
        ].tolist()
        for i, v in zip(ids, vals):
            out[i] = v
    return out


def run_scenario(trace: Trace, graph: DepGraph, scenario: Scenario) -> Schedule:
    """Idealize tensors per the scenario's keep rule, then simulate."""
    return ScenarioRunner(trace, graph).run(scenario)


class ScenarioRunner:
    """Shares extracted tensors across many scenario simulations of one job.

    Results are cached per scenario; `sim_count` counts actual simulator
    invocations (cache hits are free). Independent scenarios may be
    prefetched over a process pool; only their jct and per-step durations
    travel back, which is all any metric consumes.
    """

    def __init__(self, trace: Trace, graph: DepGraph):
        self.trace = trace
        self.graph = graph
        self.tensors = original_tensors(trace, graph)
        self.sim_count = 0
        self._cache: dict[Scenario, Schedule] = {}
        self._summaries: dict[Scenario, tuple[float, tuple]] = {}

    def run(self, scenario: Scenario) -> Schedule:
        cached = self._cache.get(scenario)
        if cached is not None:
            return cached
        scenario.validate_against(self.trace.topology)
        fixed = {
            t: idealize(tensor, scenario.keep_mask(tensor, self.trace.topology))
            for t, tensor in self.tensors.items()
        }
        schedule = simulate(self.graph, duration_vector(self.graph, fixed))
        self.sim_count += 1
        self._cache[scenario] = schedule
        self._summaries[scenario] = (schedule.jct, schedule.step_spans)
        return schedule

    def jct(self, scenario: Scenario) -> float:
        if scenario in self._summaries:
            return self._summaries[scenario][0]
        return self.run(scenario).jct

    def spans(self, scenario: Scenario) -> tuple:
        if scenario in self._summaries:
            return self._summaries[scenario][1]
        return self.run(scenario).step_spans

    def prefetch(self, scenarios: Sequence[Scenario], jobs: int = 1) -> None:
        """Simulate the given scenarios, in parallel when jobs > 1."""
        todo = [s for s in dict.fromkeys(scenarios) if s not in self._summaries]
        if not todo:
            return
        if jobs <= 1 or len(todo) < 2:
            for s in todo:
                self.run(s)
            return
        import concurrent.futures
        import pickle

        payload = pickle.dumps((self.trace, self.graph))
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(jobs, len(todo)), initializer=_pool_init, initargs=(payload,)
        ) as pool:
            for scenario, jct, spans in pool.map(_pool_run, todo):
                self._summaries[scenario] = (jct, spans)
                self.sim_count += 1


_POOL_RUNNER = None


def _pool_init(payload: bytes) -> None:
    global _POOL_RUNNER
    import pickle

    trace, graph = pickle.loads(payload)
    _POOL_RUNNER = ScenarioRunner(trace, graph)


def _pool_run(scenario: Scenario):
    schedule = _POOL_RUNNER.run(scenario)
    return scenario, schedule.jct, schedule.step_spans
