"""Synthetic trace generator with configurable straggler injections.

The generator decides ground-truth durations per operation, then reuses the
what-if engine as its timestamp engine, so a generated trace replayed through
the simulator reproduces its own timeline exactly. GC pauses and launch
delays are applied as launch shifts the analysis simulator deliberately does
not model; they are the controlled source of simulation discrepancy.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .depgraph import build_graph_from_streams
from .errors import ConfigError
from .model import (
    COMPUTE_TYPES,
    JobTopology,
    OpKey,
    OpRecord,
    OpType,
    StreamId,
    Trace,
    WorkerId,
    assign_seq,
    cell_domain,
)
from .whatif import Schedule, simulate

GPIPE = "gpipe"
ONE_F_ONE_B = "1f1b"
SCHEDULES = (GPIPE, ONE_F_ONE_B)


@dataclass(frozen=True)
class LengthDist:
    """Sequence-length distribution for the data-skew injection.

    kinds: lognormal(median, sigma), uniform(low, high), constant(value).
    The default long-tailed shape is a truncated lognormal; it is a synthetic
    stand-in, not a measured distribution.
    """

    kind: str = "lognormal"
    median: float = 2000.0
    sigma: float = 1.2
    low: int = 1
    high: int = 32768
    value: int = 4096

    def sample(self, rng: random.Random, max_len: int) -> int:
        if self.kind == "lognormal":
            raw = rng.lognormvariate(math.log(self.median), self.sigma)
        elif self.kind == "uniform":
            raw = rng.uniform(self.low, self.high)
        elif self.kind == "constant":
            raw = self.value
        else:
            raise ConfigError(f"unknown length distribution {self.kind!r}")
        return max(1, min(int(raw), max_len))

    def to_json_dict(self) -> dict:
        if self.kind == "lognormal":
            return {"kind": self.kind, "median": self.median, "sigma": self.sigma}
        if self.kind == "uniform":
            return {"kind": self.kind, "low": self.low, "high": self.high}
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "LengthDist":
        return cls(**dict(d))


@dataclass(frozen=True)
class SlowWorker:
    """One worker's ops run `factor` times slower (a bad machine)."""

    worker: WorkerId
    factor: float
    op_kinds: tuple[OpType, ...] = COMPUTE_TYPES

    kind = "slow-worker"

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pp": self.worker.pp_rank,
            "dp": self.worker.dp_rank,
            "factor": self.factor,
            "op_kinds": [t.value for t in self.op_kinds],
        }


@dataclass(frozen=True)
class LastStage:
    """Last pipeline stage computes slower (uneven layer partitioning)."""

    fwd_factor: float = 2.07
    bwd_factor: float = 1.41

    kind = "last-stage"

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "fwd_factor": self.fwd_factor, "bwd_factor": self.bwd_factor}


@dataclass(frozen=True)
class SeqlenDriven:
    """Compute durations follow the squared-length cost of packed microbatches.

    Each (step, dp rank) draws its own packs, so load varies across DP ranks
    and steps; backward work is `rho` times forward work.
    """

    max_seq_len: int = 32768
    capacity: int | None = None  # defaults to max_seq_len
    distribution: LengthDist = field(default_factory=LengthDist)
    rho: float = 2.0

    kind = "seqlen-driven"

    @property
    def cap(self) -> int:
        return self.capacity if self.capacity is not None else self.max_seq_len

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "max_seq_len": self.max_seq_len,
            "capacity": self.capacity,
            "distribution": self.distribution.to_json_dict(),
            "rho": self.rho,
        }


@dataclass(frozen=True)
class GcPause:
    """Stop-the-world pauses delaying the next forward-compute launch.

    Worker i pauses at steps where step % interval == (phase_base +
    i * phase_offset) % interval; a non-zero offset staggers workers so they
    pause at different steps. Backward compute is unaffected (it is not
    launched from the paused interpreter).
    """

    interval_steps: int
    pause_us: int
    phase_offset: int = 1
    phase_base: int = 0

    kind = "gc-pause"

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "interval_steps": self.interval_steps,
            "pause_us": self.pause_us,
            "phase_offset": self.phase_offset,
            "phase_base": self.phase_base,
        }


@dataclass(frozen=True)
class CommJitter:
    """Random transfer-duration inflation on one communication op type."""

    op_type: OpType
    factor: float
    probability: float

    kind = "comm-jitter"

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "op": self.op_type.value,
            "factor": self.factor,
            "probability": self.probability,
        }


@dataclass(frozen=True)
class LaunchDelay:
    """Fixed launch delay before each step's first forward-compute on the
    first pipeline stage.

    Models unprofiled CPU work (data loading, batch preparation) that the
    analysis simulator does not see; downstream stages inherit the shift
    through their receives, so each step stretches by the delay once.
    """

    delay_us: int

    kind = "launch-delay"

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "delay_us": self.delay_us}


Injection = SlowWorker | LastStage | SeqlenDriven | GcPause | CommJitter | LaunchDelay


def injection_from_json_dict(d: Mapping) -> Injection:
    kind = d.get("kind")
    if kind == "slow-worker":
        op_kinds = tuple(OpType.from_name(n) for n in d.get("op_kinds", [t.value for t in COMPUTE_TYPES]))
        return SlowWorker(WorkerId(d["pp"], d["dp"]), d["factor"], op_kinds)
    if kind == "last-stage":
        return LastStage(d.get("fwd_factor", 2.07), d.get("bwd_factor", 1.41))
    if kind == "seqlen-driven":
        dist = LengthDist.from_json_dict(d["distribution"]) if "distribution" in d else LengthDist()
        return SeqlenDriven(d.get("max_seq_len", 32768), d.get("capacity"), dist, d.get("rho", 2.0))
    if kind == "gc-pause":
        return GcPause(d["interval_steps"], d["pause_us"], d.get("phase_offset", 1), d.get("phase_base", 0))
    if kind == "comm-jitter":
        return CommJitter(OpType.from_name(d["op"]), d["factor"], d["probability"])
    if kind == "launch-delay":
        return LaunchDelay(d["delay_us"])
    raise ConfigError(f"unknown injection kind {kind!r}")


@dataclass(frozen=True)
class GenConfig:
    topology: JobTopology
    schedule: str = ONE_F_ONE_B
    base_fwd: int = 2000
    base_bwd: int = 4000
    base_p2p: int = 300
    base_params: int = 1000
    base_grads: int = 2500
    noise: float = 0.0
    injections: tuple[Injection, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        for name in ("base_fwd", "base_bwd", "base_p2p", "base_params", "base_grads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must be in [0, 1)")
        P, D = self.topology.pp_degree, self.topology.dp_degree
        for inj in self.injections:
            if isinstance(inj, SlowWorker):
                if not (0 <= inj.worker.pp_rank < P and 0 <= inj.worker.dp_rank < D):
                    raise ConfigError(f"slow-worker {inj.worker} outside topology")
                if inj.factor < 1:
                    raise ConfigError("slow-worker factor must be >= 1")
            elif isinstance(inj, LastStage):
                if inj.fwd_factor < 1 or inj.bwd_factor < 1:
                    raise ConfigError("last-stage factors must be >= 1")
            elif isinstance(inj, SeqlenDriven):
                if inj.max_seq_len < 1 or inj.cap < 1:
                    raise ConfigError("seqlen parameters must be positive")
            elif isinstance(inj, GcPause):
                if inj.interval_steps < 1 or inj.pause_us < 0:
                    raise ConfigError("gc-pause needs interval >= 1 and pause >= 0")
            elif isinstance(inj, CommJitter):
                if inj.factor < 1:
                    raise ConfigError("comm-jitter factor must be >= 1")
                if not 0 <= inj.probability <= 1:
                    raise ConfigError("comm-jitter probability must be in [0, 1]")
            elif isinstance(inj, LaunchDelay):
                if inj.delay_us < 0:
                    raise ConfigError("launch delay must be >= 0")

    def to_json_dict(self) -> dict:
        t = self.topology
        return {
            "topology": {
                "dp_degree": t.dp_degree,
                "pp_degree": t.pp_degree,
                "num_steps": t.num_steps,
                "microbatches_per_step": t.microbatches_per_step,
            },
            "schedule": self.schedule,
            "base_fwd": self.base_fwd,
            "base_bwd": self.base_bwd,
            "base_p2p": self.base_p2p,
            "base_params": self.base_params,
            "base_grads": self.base_grads,
            "noise": self.noise,
            "injections": [i.to_json_dict() for i in self.injections],
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "GenConfig":
        try:
            topo = JobTopology(**dict(d["topology"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad topology: {e}") from None
        injections = tuple(injection_from_json_dict(i) for i in d.get("injections", []))
        kwargs = {
            k: d[k]
            for k in ("schedule", "base_fwd", "base_bwd", "base_p2p", "base_params", "base_grads", "noise", "seed")
            if k in d
        }
        cfg = cls(topology=topo, injections=injections, **kwargs)
        cfg.validate()
        return cfg


def load_config(path: str | Path) -> GenConfig:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # 3.10
            import tomli as tomllib

        data = tomllib.loads(path.read_text(encoding="utf-8"))
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
    return GenConfig.from_json_dict(data)


@dataclass(frozen=True)
class GroundTruth:
    """What the generator actually injected, for validating the analysis."""

    jct: int
    baseline_jct: int
    slowdown: float
    per_step_spans: tuple[int, ...]
    injections: tuple[Injection, ...]
    seed: int
    schedule: str

    def to_json_dict(self) -> dict:
        return {
            "jct": self.jct,
            "baseline_jct": self.baseline_jct,
            "slowdown": self.slowdown,
            "per_step_spans": list(self.per_step_spans),
            "injections": [i.to_json_dict() for i in self.injections],
            "seed": self.seed,
            "schedule": self.schedule,
        }


def seqlen_sample(
    rng: random.Random,
    distribution: LengthDist,
    max_seq_len: int,
    capacity: int | None = None,
    count: int = 1,
) -> list[list[int]]:
    """Pack randomly drawn sequence lengths into `count` microbatches.

    Lengths accumulate into the current microbatch until the next draw would
    exceed the capacity; that draw opens the next microbatch.
    """
    cap = capacity if capacity is not None else max_seq_len
    max_draw = min(max_seq_len, cap)
    batches: list[list[int]] = []
    current: list[int] = []
    total = 0
    while len(batches) < count:
        length = distribution.sample(rng, max_draw)
        if current and total + length > cap:
            batches.append(current)
            current = []
            total = 0
            if len(batches) == count:
                break
        current.append(length)
        total += length
    return batches


def build_stream_orders(
    topology: JobTopology, schedule: str
) -> dict[StreamId, tuple[OpKey, ...]]:
    """Per-stream launch order for a GPipe or 1F1B microbatch schedule."""
    P, D, M = topology.pp_degree, topology.dp_degree, topology.microbatches_per_step
    orders: dict[StreamId, list[OpKey]] = {}

    def stream(worker: WorkerId, kind: str) -> list[OpKey]:
        return orders.setdefault(StreamId(worker, kind), [])

    for p in range(P):
        fwd_order = list(range(M))
        if schedule == GPIPE:
            bwd_order = list(reversed(range(M)))
            compute: list[tuple[OpType, int]] = [(OpType.FORWARD_COMPUTE, m) for m in fwd_order]
            compute += [(OpType.BACKWARD_COMPUTE, m) for m in bwd_order]
        else:
            bwd_order = list(range(M))
            warmup = min(M, P - 1 - p)
            compute = [(OpType.FORWARD_COMPUTE, m) for m in range(warmup)]
            for j in range(M - warmup):
                compute.append((OpType.FORWARD_COMPUTE, warmup + j))
                compute.append((OpType.BACKWARD_COMPUTE, j))
            compute += [(OpType.BACKWARD_COMPUTE, m) for m in range(M - warmup, M)]

        for d in range(D):
            w = WorkerId(p, d)
            for s in range(topology.num_steps):
                stream(w, "compute").extend(OpKey(t, s, m, p, d) for t, m in compute)
                stream(w, "dp-comm").append(OpKey(OpType.PARAMS_SYNC, s, 0, p, d))
                stream(w, "dp-comm").append(OpKey(OpType.GRADS_SYNC, s, 0, p, d))
                if p < P - 1:
                    stream(w, "fwd-send").extend(OpKey(OpType.FORWARD_SEND, s, m, p, d) for m in fwd_order)
                    stream(w, "bwd-recv").extend(OpKey(OpType.BACKWARD_RECV, s, m, p, d) for m in bwd_order)
                if p > 0:
                    stream(w, "fwd-recv").extend(OpKey(OpType.FORWARD_RECV, s, m, p, d) for m in fwd_order)
                    stream(w, "bwd-send").extend(OpKey(OpType.BACKWARD_SEND, s, m, p, d) for m in bwd_order)

    return {sid: tuple(seq) for sid, seq in orders.items()}


def _base_durations(config: GenConfig) -> dict[OpType, int]:
    return {
        OpType.FORWARD_COMPUTE: config.base_fwd,
        OpType.BACKWARD_COMPUTE: config.base_bwd,
        OpType.FORWARD_SEND: config.base_p2p,
        OpType.FORWARD_RECV: config.base_p2p,
        OpType.BACKWARD_SEND: config.base_p2p,
        OpType.BACKWARD_RECV: config.base_p2p,
        OpType.PARAMS_SYNC: config.base_params,
        OpType.GRADS_SYNC: config.base_grads,
    }


def _clamp(x: float) -> int:
    return max(1, round(x))


def generate(config: GenConfig) -> tuple[Trace, GroundTruth]:
    """Emit a synthetic trace plus the ground truth behind it.

    Baseline durations share the injected run's noise draws, so the recorded
    ground-truth slowdown isolates the injections' effect.
    """
    config.validate()
    topo = config.topology
    stream_orders = build_stream_orders(topo, config.schedule)
    graph = build_graph_from_streams(topo, stream_orders)

    rng_noise = random.Random(f"{config.seed}:noise")
    rng_seqlen = random.Random(f"{config.seed}:seqlen")
    rng_jitter = random.Random(f"{config.seed}:jitter")

    base = _base_durations(config)
    domains = {t: cell_domain(t, topo) for t in OpType}

    noise_of: dict[OpKey, float] = {}
    for t in OpType:
        for key in domains[t].keys():
            noise_of[key] = 1.0 + rng_noise.uniform(-config.noise, config.noise) if config.noise else 1.0

    # Seqlen substitution: per (step, dp) microbatch packs shared by all
    # pipeline stages, since every stage processes the same sequences.
    seqlen_inj = next((i for i in config.injections if isinstance(i, SeqlenDriven)), None)
    seqlen_fwd: dict[tuple[int, int, int], float] = {}
    if seqlen_inj is not None:
        cap_sq = seqlen_inj.cap * seqlen_inj.cap
        for s in range(topo.num_steps):
            for d in range(topo.dp_degree):
                packs = seqlen_sample(
                    rng_seqlen, seqlen_inj.distribution, seqlen_inj.max_seq_len,
                    seqlen_inj.cap, topo.microbatches_per_step,
                )
                for m, pack in enumerate(packs):
                    cost = sum(x * x for x in pack)
                    seqlen_fwd[(s, m, d)] = config.base_fwd * cost / cap_sq

    factor_of: dict[OpKey, float] = {}

    def bump(key: OpKey, f: float):
        factor_of[key] = factor_of.get(key, 1.0) * f

    P = topo.pp_degree
    for inj in config.injections:
        if isinstance(inj, SlowWorker):
            for t in inj.op_kinds:
                dom = domains[t]
                if dom.pp_lo <= inj.worker.pp_rank < dom.pp_hi:
                    for s in range(dom.num_steps):
                        for m in range(dom.mb_extent):
                            bump(OpKey(t, s, m, inj.worker.pp_rank, inj.worker.dp_rank), inj.factor)
        elif isinstance(inj, LastStage):
            for s in range(topo.num_steps):
                for m in range(topo.microbatches_per_step):
                    for d in range(topo.dp_degree):
                        bump(OpKey(OpType.FORWARD_COMPUTE, s, m, P - 1, d), inj.fwd_factor)
                        bump(OpKey(OpType.BACKWARD_COMPUTE, s, m, P - 1, d), inj.bwd_factor)
        elif isinstance(inj, CommJitter):
            for key in domains[inj.op_type].keys():
                if rng_jitter.random() < inj.probability:
                    bump(key, inj.factor)

    durations: dict[OpKey, int] = {}
    baseline: dict[OpKey, int] = {}
    for t in OpType:
        for key in domains[t].keys():
            plain = base[t]
            injected = plain
            if t is OpType.FORWARD_COMPUTE and (key.step, key.mb, key.dp) in seqlen_fwd:
                injected = seqlen_fwd[(key.step, key.mb, key.dp)]
            elif t is OpType.BACKWARD_COMPUTE and (key.step, key.mb, key.dp) in seqlen_fwd:
                injected = seqlen_fwd[(key.step, key.mb, key.dp)] * seqlen_inj.rho
            nz = noise_of[key]
            durations[key] = _clamp(injected * nz * factor_of.get(key, 1.0))
            baseline[key] = _clamp(plain * nz)

    delays: dict[OpKey, int] = {}

    def delay_first_fwd(worker: WorkerId, step: int, amount: int):
        seq = stream_orders[StreamId(worker, "compute")]
        for key in seq:
            if key.step == step and key.op is OpType.FORWARD_COMPUTE:
                delays[key] = delays.get(key, 0) + amount
                return

    D = topo.dp_degree
    for inj in config.injections:
        if isinstance(inj, LaunchDelay):
            for w in topo.workers():
                if w.pp_rank != 0:
                    continue
                for s in range(topo.num_steps):
                    delay_first_fwd(w, s, inj.delay_us)
        elif isinstance(inj, GcPause):
            for w in topo.workers():
                worker_index = w.pp_rank * D + w.dp_rank
                phase = (inj.phase_base + worker_index * inj.phase_offset) % inj.interval_steps
                for s in range(topo.num_steps):
                    if s % inj.interval_steps == phase:
                        delay_first_fwd(w, s, inj.pause_us)

    emitted: Schedule = simulate(graph, durations, launch_delays=delays or None)
    if durations == baseline and not delays:
        baseline_jct = emitted.jct
    else:
        baseline_jct = simulate(graph, baseline).jct

    records = [
        OpRecord(k.op, k.step, k.mb, WorkerId(k.pp, k.dp), start, end)
        for k, start, end in emitted.rows()
    ]
    meta = {"synthetic": True, "seed": config.seed, "schedule": config.schedule}
    trace = Trace(topo, tuple(assign_seq(records)), meta)
    truth = GroundTruth(
        jct=emitted.jct,
        baseline_jct=baseline_jct,
        slowdown=emitted.jct / baseline_jct,
        per_step_spans=tuple(emitted.step_spans),
        injections=config.injections,
        seed=config.seed,
        schedule=config.schedule,
    )
    return trace, truth
