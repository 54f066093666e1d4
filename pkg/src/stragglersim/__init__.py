"""Trace-driven what-if analysis of stragglers in hybrid-parallel training.

Quantifies how much faster a data-parallel x pipeline-parallel training job
would have run without stragglers, attributes the slowdown to op types,
workers, and pipeline stages, classifies common root causes, and plans
sequence-length rebalancing. Ships a synthetic trace generator for
validation.
"""

from .balancer import BatchPlan, microbatch_cost, plan_batch, plan_improvement, redistribute, split_microbatches
from .depgraph import CommGroup, DepGraph, build_graph, build_graph_from_streams, to_dot, topo_order
from .errors import (
    CycleDetected,
    EmptyGrid,
    EmptyMicrobatch,
    HeaderMissing,
    IncompleteCoverage,
    InsufficientSamples,
    MalformedLine,
    MissingPeer,
    NotStraggling,
    StragglerSimError,
    TooFewSequences,
    TraceIOError,
    UnknownOpType,
    ValidationFailed,
    ZeroIdeal,
)
from .heatmap import Heatmap, from_worker_slowdowns, per_step_heatmaps, render_heatmap, wallclock_step_heatmaps
from .metrics import (
    DISCREPANCY_LIMIT,
    STRAGGLING_THRESHOLD,
    MetricsReport,
    actual_step_spans,
    attribution,
    discrepancy,
    optype_slowdown,
    per_step_slowdown,
    slowdown,
    waste,
)
from .model import (
    COMM_TYPES,
    COMPUTE_TYPES,
    DP_COMM_TYPES,
    OPTYPE_GROUPS,
    PP_COMM_TYPES,
    JobTopology,
    OpDurationTensor,
    OpKey,
    OpRecord,
    OpType,
    StreamId,
    Trace,
    Violation,
    WorkerId,
    assign_seq,
    cell_domain,
    tensor_from_trace,
    validate,
)
from .pipeline import AnalysisReport, analyze_trace, render_report_dir
from .rootcause import (
    RootCauseReport,
    analyze_root_causes,
    approx_worker_slowdowns,
    classify,
    exact_worker_slowdowns,
    fb_correlation,
    last_stage_score,
    machine_issue_score,
    select_top_workers,
)
from .synthgen import (
    CommJitter,
    GcPause,
    GenConfig,
    GroundTruth,
    Injection,
    LastStage,
    LaunchDelay,
    LengthDist,
    SeqlenDriven,
    SlowWorker,
    build_stream_orders,
    generate,
    load_config,
    seqlen_sample,
)
from .traceio import load_trace, parse_trace, save_trace, write_trace
from .whatif import (
    Scenario,
    Schedule,
    ScenarioRunner,
    idealize,
    idealized_value,
    original_tensors,
    run_scenario,
    simulate,
    transfer_durations,
)

__version__ = "0.1.0"
