"""Sequence rebalancing planner for data-parallel training batches.

Self-attention makes a microbatch's compute time scale with the sum of
squared sequence lengths, so batches packed by arrival order load DP ranks
unevenly. The planner redistributes sequences across ranks by greedy
longest-processing-time multiway partitioning on squared cost, then splits
each rank's share into microbatches with balanced raw-length sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyMicrobatch, TooFewSequences


def microbatch_cost(lengths: Sequence[int]) -> int:
    """Compute-time proxy for one microbatch: sum of squared lengths."""
    if not lengths:
        raise EmptyMicrobatch("a microbatch needs at least one sequence")
    if any(s < 1 for s in lengths):
        raise ValueError("sequence lengths must be >= 1")
    return sum(s * s for s in lengths)


def redistribute(lengths: Sequence[int], dp_degree: int) -> tuple[list[list[int]], list[int]]:
    """Assign sequences to DP ranks, balancing summed squared cost.

    Greedy longest-processing-time: sequences sorted by descending squared
    cost (stable, so equal lengths keep input order), each placed on the
    currently least-loaded rank, ties going to the lowest rank index.
    Returns (per-rank length lists, per-rank loads).
    """
    if dp_degree < 1:
        raise ValueError("dp_degree must be >= 1")
    if not lengths:
        raise ValueError("need at least one sequence")
    if any(s < 1 for s in lengths):
        raise ValueError("sequence lengths must be >= 1")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i] * lengths[i], i))
    assignments: list[list[int]] = [[] for _ in range(dp_degree)]
    loads = [0] * dp_degree
    for i in order:
        r = loads.index(min(loads))
        assignments[r].append(lengths[i])
        loads[r] += lengths[i] * lengths[i]
    return assignments, loads


def split_microbatches(rank_lengths: Sequence[int], k: int) -> list[list[int]]:
    """Divide one rank's sequences into k microbatches with balanced length sums.

    Balances raw lengths, not squares: within a rank the microbatches run
    back to back, so the goal is equal token counts per microbatch.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rank_lengths) < k:
        raise TooFewSequences(f"{len(rank_lengths)} sequence(s) cannot fill {k} microbatch(es)")
    order = sorted(range(len(rank_lengths)), key=lambda i: (-rank_lengths[i], i))
    batches: list[list[int]] = [[] for _ in range(k)]
    sums = [0] * k
    for i in order:
        b = sums.index(min(sums))
        batches[b].append(rank_lengths[i])
        sums[b] += rank_lengths[i]
    # Lengths >= 1 make the greedy fill every batch before stacking, but a
    # repair pass keeps the non-empty guarantee unconditional.
    for b in range(k):
        if not batches[b]:
            donor = max(range(k), key=lambda j: (len(batches[j]), sums[j]))
            moved = batches[donor].pop()
            sums[donor] -= moved
            batches[b].append(moved)
            sums[b] += moved
    return batches


def plan_improvement(before: Sequence[float], after: Sequence[float]) -> float:
    """Predicted step-time improvement factor: max load before over after.

    Under the squared-length cost model the step time tracks the most loaded
    rank, so this ratio is the planner's expected speedup.
    """
    if not before or not after:
        raise ValueError("load vectors must be non-empty")
    if len(before) != len(after):
        raise ValueError("load vectors must cover the same DP degree")
    return max(before) / max(after)


@dataclass(frozen=True)
class BatchPlan:
    """A planned assignment of one global batch across DP ranks."""

    dp_degree: int
    assignments: tuple[tuple[int, ...], ...]
    microbatches: tuple[tuple[tuple[int, ...], ...], ...]
    loads: tuple[int, ...]
    # Total tokens per rank; balancing squared cost can skew these, which is
    # a memory-pressure signal, reported but not acted on.
    total_tokens: tuple[int, ...]

    @property
    def token_spread(self) -> int:
        return max(self.total_tokens) - min(self.total_tokens)

    def to_json_dict(self) -> dict:
        return {
            "dp_degree": self.dp_degree,
            "assignments": [list(a) for a in self.assignments],
            "microbatches": [[list(m) for m in rank] for rank in self.microbatches],
            "loads": list(self.loads),
            "total_tokens": list(self.total_tokens),
            "token_spread": self.token_spread,
        }


def plan_batch(lengths: Sequence[int], dp_degree: int, microbatches_per_rank: int = 1) -> BatchPlan:
    """Redistribute one batch and split each rank's share into microbatches."""
    assignments, loads = redistribute(lengths, dp_degree)
    if any(len(a) < microbatches_per_rank for a in assignments):
        raise TooFewSequences(
            f"some rank received fewer than {microbatches_per_rank} sequence(s); "
            "reduce microbatch count or dp degree"
        )
    split = [split_microbatches(a, microbatches_per_rank) for a in assignments]
    return BatchPlan(
        dp_degree=dp_degree,
        assignments=tuple(tuple(a) for a in assignments),
        microbatches=tuple(tuple(tuple(m) for m in rank) for rank in split),
        loads=tuple(loads),
        total_tokens=tuple(sum(a) for a in assignments),
    )
