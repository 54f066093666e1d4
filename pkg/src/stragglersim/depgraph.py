"""Operation dependency DAG: six streams per worker, four dependency classes.

Plain edges encode same-stream sequencing, params/grads coupling to compute,
and recv-before/send-after-compute. Collective groups and P2P pairs are NOT
edges; the simulator enforces their no-transfer-before-all-launch semantics.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import CycleDetected, MissingPeer
from .model import (
    JobTopology,
    OpKey,
    OpType,
    StreamId,
    Trace,
    stream_of,
)


@dataclass(frozen=True)
class CommGroup:
    kind: str  # "collective" or "p2p"
    members: tuple[OpKey, ...]


class DepGraph:
    """Immutable dependency graph over operation keys.

    Nodes are held in canonical key order; `index` maps a key to its node id.
    `succs`/`preds` hold plain dependency edges as node-id tuples. `groups`
    lists comm groups; `group_of[i]` is the group id of node i or -1.
    """

    __slots__ = (
        "topology",
        "nodes",
        "index",
        "succs",
        "preds",
        "groups",
        "group_of",
        "stream_order",
        "node_step",
        "node_is_comm",
    )

    def __init__(
        self,
        topology: JobTopology,
        nodes: tuple[OpKey, ...],
        edges: Iterable[tuple[int, int]],
        groups: list[CommGroup],
        stream_order: dict[StreamId, tuple[OpKey, ...]],
    ):
        self.topology = topology
        self.nodes = nodes
        self.index = {k: i for i, k in enumerate(nodes)}
        succs: list[list[int]] = [[] for _ in nodes]
        preds: list[list[int]] = [[] for _ in nodes]
        seen = set()
        for u, v in edges:
            if (u, v) in seen:
                continue
            seen.add((u, v))
            succs[u].append(v)
            preds[v].append(u)
        self.succs = tuple(tuple(sorted(s)) for s in succs)
        self.preds = tuple(tuple(sorted(p)) for p in preds)
        self.groups = tuple(groups)
        group_of = [-1] * len(nodes)
        for gid, g in enumerate(groups):
            for k in g.members:
                group_of[self.index[k]] = gid
        self.group_of = tuple(group_of)
        self.stream_order = stream_order
        self.node_step = tuple(k.step for k in nodes)
        self.node_is_comm = tuple(k.op.is_comm for k in nodes)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def edges(self) -> Iterable[tuple[OpKey, OpKey]]:
        for u, ss in enumerate(self.succs):
            for v in ss:
                yield self.nodes[u], self.nodes[v]

    def group_members(self, key: OpKey) -> tuple[OpKey, ...]:
        gid = self.group_of[self.index[key]]
        return self.groups[gid].members if gid >= 0 else ()


def build_graph(trace: Trace) -> DepGraph:
    """Derive the dependency DAG from a validated trace.

    Stream order comes from the trace's launch ordinals, not from a
    re-derived microbatch schedule: the trace is the schedule.
    """
    streams: dict[StreamId, list] = {}
    for r in trace.records:
        streams.setdefault(stream_of(r), []).append(r)
    order: dict[StreamId, tuple[OpKey, ...]] = {}
    for sid, members in streams.items():
        members.sort(key=lambda r: r.seq)
        order[sid] = tuple(r.key for r in members)
    return build_graph_from_streams(trace.topology, order)


def build_graph_from_streams(
    topology: JobTopology, stream_order: Mapping[StreamId, tuple[OpKey, ...]]
) -> DepGraph:
    """Build the DAG from explicit per-stream launch orders.

    Used both on parsed traces and by the synthetic generator, which knows
    its launch order before any timestamps exist.
    """
    nodes = tuple(sorted((k for seq in stream_order.values() for k in seq), key=OpKey.sort_key))
    index = {k: i for i, k in enumerate(nodes)}
    if len(index) != len(nodes):
        raise MissingPeer("duplicate operation key across streams")
    edges: list[tuple[int, int]] = []

    # (a) same-stream sequencing
    for seq in stream_order.values():
        for a, b in zip(seq, seq[1:]):
            edges.append((index[a], index[b]))

    # (b) DP comm <-> compute: params-sync precedes the first forward of its
    # step on the worker; the last backward of the step precedes grads-sync.
    # First/last are by stream position, tolerating permuted microbatch ids.
    P, D = topology.pp_degree, topology.dp_degree
    for sid, seq in stream_order.items():
        if sid.kind != "compute":
            continue
        first_fwd: dict[int, OpKey] = {}
        last_bwd: dict[int, OpKey] = {}
        for k in seq:
            if k.op is OpType.FORWARD_COMPUTE and k.step not in first_fwd:
                first_fwd[k.step] = k
            elif k.op is OpType.BACKWARD_COMPUTE:
                last_bwd[k.step] = k
        w = sid.worker
        for step, k in first_fwd.items():
            ps = OpKey(OpType.PARAMS_SYNC, step, 0, w.pp_rank, w.dp_rank)
            if ps in index:
                edges.append((index[ps], index[k]))
        for step, k in last_bwd.items():
            gs = OpKey(OpType.GRADS_SYNC, step, 0, w.pp_rank, w.dp_rank)
            if gs in index:
                edges.append((index[k], index[gs]))

    # (c) PP comm <-> compute on the same worker, same step and microbatch.
    for k in nodes:
        if k.op is OpType.FORWARD_RECV:
            tgt = OpKey(OpType.FORWARD_COMPUTE, k.step, k.mb, k.pp, k.dp)
            if tgt in index:
                edges.append((index[k], index[tgt]))
        elif k.op is OpType.BACKWARD_RECV:
            tgt = OpKey(OpType.BACKWARD_COMPUTE, k.step, k.mb, k.pp, k.dp)
            if tgt in index:
                edges.append((index[k], index[tgt]))
        elif k.op is OpType.FORWARD_SEND:
            src = OpKey(OpType.FORWARD_COMPUTE, k.step, k.mb, k.pp, k.dp)
            if src in index:
                edges.append((index[src], index[k]))
        elif k.op is OpType.BACKWARD_SEND:
            src = OpKey(OpType.BACKWARD_COMPUTE, k.step, k.mb, k.pp, k.dp)
            if src in index:
                edges.append((index[src], index[k]))

    # (d) cross-rank groups
    groups: list[CommGroup] = []
    collectives: dict[tuple, list[OpKey]] = {}
    for k in nodes:
        if k.op.is_dp_comm:
            collectives.setdefault((k.op, k.step, k.pp), []).append(k)
    for (op, step, pp), members in sorted(collectives.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0].value)):
        if len(members) != D:
            raise MissingPeer(
                f"collective {op.value}(step={step}, pp={pp}) has {len(members)} member(s), expected {D}"
            )
        groups.append(CommGroup("collective", tuple(sorted(members, key=OpKey.sort_key))))

    paired: set[OpKey] = set()
    for k in nodes:
        if k.op is OpType.FORWARD_SEND:
            peer = OpKey(OpType.FORWARD_RECV, k.step, k.mb, k.pp + 1, k.dp)
        elif k.op is OpType.BACKWARD_SEND:
            peer = OpKey(OpType.BACKWARD_RECV, k.step, k.mb, k.pp - 1, k.dp)
        else:
            continue
        if peer not in index:
            raise MissingPeer(f"{k} has no matching {peer.op.value}")
        groups.append(CommGroup("p2p", (k, peer)))
        paired.add(k)
        paired.add(peer)
    for k in nodes:
        if k.op in (OpType.FORWARD_RECV, OpType.BACKWARD_RECV) and k not in paired:
            raise MissingPeer(f"{k} has no matching send")

    graph = DepGraph(topology, nodes, edges, groups, dict(stream_order))
    topo_order(graph)  # raises CycleDetected on a cyclic edge set
    return graph


def topo_order(graph: DepGraph) -> list[OpKey]:
    """Deterministic Kahn topological order, ties broken by canonical key.

    The brute-force oracle simulator in the test suite walks this order.
    """
    n = graph.num_nodes
    indegree = [len(p) for p in graph.preds]
    ready = [i for i in range(n) if indegree[i] == 0]
    heapq.heapify(ready)
    out: list[OpKey] = []
    while ready:
        i = heapq.heappop(ready)
        out.append(graph.nodes[i])
        for s in graph.succs[i]:
            indegree[s] -= 1
            if indegree[s] == 0:
                heapq.heappush(ready, s)
    if len(out) != n:
        raise CycleDetected(f"{n - len(out)} node(s) participate in a dependency cycle")
    return out


def to_dot(graph: DepGraph) -> str:
    """DOT export for debugging; groups are drawn as dashed undirected links."""
    lines = ["digraph deps {", "  rankdir=LR;", '  node [shape=box, fontsize=9];']
    for k in graph.nodes:
        lines.append(f'  "{k}";')
    for u, v in graph.edges():
        lines.append(f'  "{u}" -> "{v}";')
    for g in graph.groups:
        anchor = g.members[0]
        for other in g.members[1:]:
            lines.append(f'  "{anchor}" -> "{other}" [style=dashed, dir=none, color=gray];')
    lines.append("}")
    return "\n".join(lines) + "\n"
