"""Core domain types: operation records, job topology, duration tensors.

A trace is a flat list of timed operations from one training job. Every
operation is identified by (op type, step, microbatch, pipeline rank, data
rank); durations per op type live in a dense 4-D tensor indexed the same way.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .errors import IncompleteCoverage


class OpType(enum.Enum):
    """The eight operation types a trace may contain."""

    FORWARD_COMPUTE = "forward-compute"
    BACKWARD_COMPUTE = "backward-compute"
    FORWARD_SEND = "forward-send"
    FORWARD_RECV = "forward-recv"
    BACKWARD_SEND = "backward-send"
    BACKWARD_RECV = "backward-recv"
    PARAMS_SYNC = "params-sync"
    GRADS_SYNC = "grads-sync"

    @property
    def is_compute(self) -> bool:
        return self in (OpType.FORWARD_COMPUTE, OpType.BACKWARD_COMPUTE)

    @property
    def is_pp_comm(self) -> bool:
        return self in (
            OpType.FORWARD_SEND,
            OpType.FORWARD_RECV,
            OpType.BACKWARD_SEND,
            OpType.BACKWARD_RECV,
        )

    @property
    def is_dp_comm(self) -> bool:
        return self in (OpType.PARAMS_SYNC, OpType.GRADS_SYNC)

    @property
    def is_comm(self) -> bool:
        return not self.is_compute

    @classmethod
    def from_name(cls, name: str) -> "OpType":
        try:
            return _OPTYPE_BY_NAME[name]
        except KeyError:
            raise KeyError(name) from None


_OPTYPE_BY_NAME = {t.value: t for t in OpType}

COMPUTE_TYPES = (OpType.FORWARD_COMPUTE, OpType.BACKWARD_COMPUTE)
PP_COMM_TYPES = (
    OpType.FORWARD_SEND,
    OpType.FORWARD_RECV,
    OpType.BACKWARD_SEND,
    OpType.BACKWARD_RECV,
)
DP_COMM_TYPES = (OpType.PARAMS_SYNC, OpType.GRADS_SYNC)
COMM_TYPES = PP_COMM_TYPES + DP_COMM_TYPES

# Reporting groups: send/recv of one direction move together, so their
# slowdowns are reported jointly.
OPTYPE_GROUPS: dict[str, tuple[OpType, ...]] = {
    "forward-compute": (OpType.FORWARD_COMPUTE,),
    "backward-compute": (OpType.BACKWARD_COMPUTE,),
    "forward-p2p": (OpType.FORWARD_SEND, OpType.FORWARD_RECV),
    "backward-p2p": (OpType.BACKWARD_SEND, OpType.BACKWARD_RECV),
    "params-sync": (OpType.PARAMS_SYNC,),
    "grads-sync": (OpType.GRADS_SYNC,),
}


class WorkerId(NamedTuple):
    """One logical worker: a (pipeline rank, data rank) coordinate."""

    pp_rank: int
    dp_rank: int


@dataclass(frozen=True, slots=True)
class JobTopology:
    dp_degree: int
    pp_degree: int
    num_steps: int
    microbatches_per_step: int

    def __post_init__(self):
        for name in ("dp_degree", "pp_degree", "num_steps", "microbatches_per_step"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def worker_count(self) -> int:
        return self.dp_degree * self.pp_degree

    def workers(self) -> Iterator[WorkerId]:
        for p in range(self.pp_degree):
            for d in range(self.dp_degree):
                yield WorkerId(p, d)


class OpKey(NamedTuple):
    """Identity of one operation within a job."""

    op: OpType
    step: int
    mb: int
    pp: int
    dp: int

    @property
    def worker(self) -> WorkerId:
        return WorkerId(self.pp, self.dp)

    def sort_key(self):
        """Canonical total order used for deterministic tie-breaking."""
        return (self.step, self.pp, self.dp, self.op.value, self.mb)

    def __str__(self):
        return f"{self.op.value}[s{self.step},m{self.mb},p{self.pp},d{self.dp}]"


@dataclass(frozen=True, slots=True)
class OpRecord:
    """One traced operation with wall-clock timestamps in microseconds."""

    op_type: OpType
    step: int
    microbatch: int
    worker: WorkerId
    start: int
    end: int
    seq: int = 0  # launch-order ordinal within this op's stream

    @property
    def key(self) -> OpKey:
        return OpKey(self.op_type, self.step, self.microbatch, self.worker.pp_rank, self.worker.dp_rank)

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class CellDomain:
    """The set of tensor cells an op type occupies for a given topology.

    PP-specific communication exists only on a contiguous sub-range of
    pipeline ranks (a send has no last-rank cell, a recv no first-rank cell),
    so the pp axis carries an offset. DP-specific communication happens once
    per step per stage, so its microbatch axis has extent 1.
    """

    op_type: OpType
    num_steps: int
    mb_extent: int
    pp_lo: int
    pp_hi: int  # exclusive
    dp_degree: int

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.num_steps, self.mb_extent, self.pp_hi - self.pp_lo, self.dp_degree)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def contains(self, key: OpKey) -> bool:
        return (
            key.op is self.op_type
            and 0 <= key.step < self.num_steps
            and 0 <= key.mb < self.mb_extent
            and self.pp_lo <= key.pp < self.pp_hi
            and 0 <= key.dp < self.dp_degree
        )

    def keys(self) -> Iterator[OpKey]:
        for s in range(self.num_steps):
            for m in range(self.mb_extent):
                for p in range(self.pp_lo, self.pp_hi):
                    for d in range(self.dp_degree):
                        yield OpKey(self.op_type, s, m, p, d)

    def index_of(self, key: OpKey) -> tuple[int, int, int, int]:
        return (key.step, key.mb, key.pp - self.pp_lo, key.dp)


def cell_domain(op_type: OpType, topology: JobTopology) -> CellDomain:
    """Which (step, mb, pp, dp) cells exist for this op type."""
    P = topology.pp_degree
    steps = topology.num_steps
    mbs = topology.microbatches_per_step
    dp = topology.dp_degree
    if op_type.is_compute:
        return CellDomain(op_type, steps, mbs, 0, P, dp)
    if op_type.is_dp_comm:
        return CellDomain(op_type, steps, 1, 0, P, dp)
    # PP point-to-point: forward flows rank p -> p+1, backward p -> p-1.
    if op_type in (OpType.FORWARD_SEND, OpType.BACKWARD_RECV):
        return CellDomain(op_type, steps, mbs, 0, P - 1, dp)
    return CellDomain(op_type, steps, mbs, 1, P, dp)


def implied_keys(topology: JobTopology) -> Iterator[OpKey]:
    """Every operation key a complete trace for this topology must contain."""
    for op_type in OpType:
        yield from cell_domain(op_type, topology).keys()


@dataclass(frozen=True)
class Violation:
    rule: str
    key: str
    message: str

    def __str__(self):
        return f"{self.rule}({self.key}): {self.message}"


@dataclass(frozen=True)
class Trace:
    """A validated-shape container of operation records.

    Records are stored in canonical order regardless of construction order,
    so two traces with the same content compare equal.
    """

    topology: JobTopology
    records: tuple[OpRecord, ...]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        ordered = tuple(sorted(self.records, key=lambda r: r.key.sort_key()))
        object.__setattr__(self, "records", ordered)
        object.__setattr__(self, "meta", dict(self.meta))

    def by_key(self) -> dict[OpKey, OpRecord]:
        return {r.key: r for r in self.records}

    def records_of(self, op_type: OpType) -> Iterator[OpRecord]:
        return (r for r in self.records if r.op_type is op_type)


# Stream kinds: each worker runs six streams, one hosting both compute types,
# one hosting both DP collectives, and one per PP comm type.
STREAM_COMPUTE = "compute"
STREAM_DP_COMM = "dp-comm"
STREAM_FWD_SEND = "fwd-send"
STREAM_FWD_RECV = "fwd-recv"
STREAM_BWD_SEND = "bwd-send"
STREAM_BWD_RECV = "bwd-recv"

_STREAM_OF_OP = {
    OpType.FORWARD_COMPUTE: STREAM_COMPUTE,
    OpType.BACKWARD_COMPUTE: STREAM_COMPUTE,
    OpType.PARAMS_SYNC: STREAM_DP_COMM,
    OpType.GRADS_SYNC: STREAM_DP_COMM,
    OpType.FORWARD_SEND: STREAM_FWD_SEND,
    OpType.FORWARD_RECV: STREAM_FWD_RECV,
    OpType.BACKWARD_SEND: STREAM_BWD_SEND,
    OpType.BACKWARD_RECV: STREAM_BWD_RECV,
}


class StreamId(NamedTuple):
    worker: WorkerId
    kind: str


def stream_of(key_or_record) -> StreamId:
    op = key_or_record.op_type if isinstance(key_or_record, OpRecord) else key_or_record.op
    return StreamId(key_or_record.worker, _STREAM_OF_OP[op])


def assign_seq(records: Iterable[OpRecord]) -> list[OpRecord]:
    """Return records with per-stream launch ordinals derived from timestamps.

    Within a stream, order is ascending start time; ties break on
    (op type name, microbatch) so the result does not depend on input order.
    """
    streams: dict[StreamId, list[OpRecord]] = {}
    for r in records:
        streams.setdefault(stream_of(r), []).append(r)
    out = []
    for members in streams.values():
        members.sort(key=lambda r: (r.start, r.op_type.value, r.microbatch))
        for i, r in enumerate(members):
            out.append(r if r.seq == i else OpRecord(r.op_type, r.step, r.microbatch, r.worker, r.start, r.end, i))
    return out


def validate(trace: Trace) -> list[Violation]:
    """Check every trace invariant; violations are returned, never raised."""
    topo = trace.topology
    violations: list[Violation] = []
    domains = {t: cell_domain(t, topo) for t in OpType}
    seen: dict[OpKey, OpRecord] = {}

    for r in trace.records:
        key = r.key
        if key in seen:
            violations.append(Violation("DuplicateCell", str(key), "cell appears more than once"))
            continue
        seen[key] = r
        if not domains[r.op_type].contains(key):
            violations.append(
                Violation("UnexpectedCell", str(key), "cell outside the domain implied by the topology")
            )
        if r.end < r.start:
            violations.append(Violation("NegativeDuration", str(key), f"end {r.end} < start {r.start}"))

    for op_type in OpType:
        dom = domains[op_type]
        if dom.size == 0:
            continue
        for key in dom.keys():
            if key not in seen:
                violations.append(Violation("MissingCell", str(key), "no record for this cell"))

    # seq must equal the per-stream rank in (start, op name, mb) order, or
    # same-stream dependency edges would not be reproducible from disk.
    streams: dict[StreamId, list[OpRecord]] = {}
    for r in trace.records:
        streams.setdefault(stream_of(r), []).append(r)
    for sid, members in streams.items():
        members.sort(key=lambda r: (r.start, r.op_type.value, r.microbatch))
        for i, r in enumerate(members):
            if r.seq != i:
                violations.append(
                    Violation("BadSeq", str(r.key), f"seq {r.seq} but launch-order rank is {i}")
                )

    violations.sort(key=lambda v: (v.rule, v.key))
    return violations


class OpDurationTensor:
    """Dense per-op-type durations indexed [step, microbatch, pp, dp].

    Compute cells hold traced durations; communication cells hold
    transfer-durations. Values are immutable after construction.
    """

    __slots__ = ("op_type", "domain", "values")

    def __init__(self, op_type: OpType, domain: CellDomain, values: np.ndarray):
        if values.shape != domain.shape:
            raise ValueError(f"shape {values.shape} does not match domain {domain.shape}")
        if values.size and float(values.min()) < 0:
            raise ValueError("durations must be non-negative")
        self.op_type = op_type
        self.domain = domain
        arr = np.asarray(values, dtype=np.float64).copy()
        arr.setflags(write=False)
        self.values = arr

    @classmethod
    def from_mapping(cls, topology: JobTopology, op_type: OpType, durations: Mapping[OpKey, float]):
        dom = cell_domain(op_type, topology)
        missing = [k for k in dom.keys() if k not in durations]
        extra = [k for k in durations if not dom.contains(k)]
        if missing or extra:
            raise IncompleteCoverage(op_type, missing, extra)
        arr = np.empty(dom.shape, dtype=np.float64)
        for k, v in durations.items():
            arr[dom.index_of(k)] = v
        return cls(op_type, dom, arr)

    def value(self, key: OpKey) -> float:
        return float(self.values[self.domain.index_of(key)])

    def with_values(self, values: np.ndarray) -> "OpDurationTensor":
        return OpDurationTensor(self.op_type, self.domain, values)

    def __eq__(self, other):
        return (
            isinstance(other, OpDurationTensor)
            and self.op_type is other.op_type
            and self.domain == other.domain
            and np.array_equal(self.values, other.values)
        )


def tensor_from_trace(
    trace: Trace, op_type: OpType, durations: Mapping[OpKey, float] | None = None
) -> OpDurationTensor:
    """Build the duration tensor for one op type.

    For compute types the trace's own end-start durations are used unless an
    explicit mapping is given; communication types require the caller to
    supply transfer-durations (see whatif.transfer_durations).
    """
    if durations is None:
        if op_type.is_comm:
            raise ValueError(f"{op_type.value}: transfer-durations must be supplied for communication ops")
        durations = {r.key: r.duration for r in trace.records_of(op_type)}
    return OpDurationTensor.from_mapping(trace.topology, op_type, durations)
