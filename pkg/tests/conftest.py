"""Shared builders for hand-crafted traces."""

import pytest

from stragglersim.model import (
    JobTopology,
    OpKey,
    OpRecord,
    OpType,
    Trace,
    WorkerId,
    assign_seq,
    implied_keys,
    validate,
)


def build_trace(topology, times, meta=None, check=True):
    """Trace from an explicit {OpKey: (start, end)} mapping."""
    records = [
        OpRecord(k.op, k.step, k.mb, WorkerId(k.pp, k.dp), start, end)
        for k, (start, end) in times.items()
    ]
    trace = Trace(topology, tuple(assign_seq(records)), meta or {})
    if check:
        assert validate(trace) == []
    return trace


def sequential_times(topology, duration=10, gap=1):
    """Arbitrary valid timestamps: every op in its own disjoint slot.

    Ops are laid out in canonical key order, so the result is deterministic
    and trivially satisfies end >= start and per-stream orderability.
    """
    times = {}
    t = 0
    for key in sorted(implied_keys(topology), key=OpKey.sort_key):
        times[key] = (t, t + duration)
        t += duration + gap
    return times


def minimal_trace(num_steps=1):
    """Complete 1x1 trace: params, fwd, bwd, grads per step, in that order."""
    topology = JobTopology(dp_degree=1, pp_degree=1, num_steps=num_steps, microbatches_per_step=1)
    times = {}
    t = 0
    for s in range(num_steps):
        for op in (OpType.PARAMS_SYNC, OpType.FORWARD_COMPUTE, OpType.BACKWARD_COMPUTE, OpType.GRADS_SYNC):
            mb = 0
            times[OpKey(op, s, mb, 0, 0)] = (t, t + 10)
            t += 12
    return build_trace(topology, times)


@pytest.fixture
def tiny_trace():
    return minimal_trace(num_steps=1)
