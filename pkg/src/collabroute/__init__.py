"""Collaboration-constrained MoE routing, co-activation profiling, expert
placement and zero-redundancy all-to-all accounting."""

from .commsim import (
    CommFractionTable,
    DispatchAccount,
    SpeedupModel,
    account_dispatch,
    estimate_speedup,
    redundancy_ratio,
    sweep_ep,
)
from .core import (
    ExpertParams,
    MoEConfig,
    RoutingBatch,
    RoutingDecision,
    expert_forward,
    gate_scores,
    moe_forward,
    route_c2r,
    route_c2r_batch,
    route_topk,
    route_topk_batch,
)
from .errors import ConfigError, InvariantError, TraceFormatError
from .placement import PlacementMap, PlacementScore, place_greedy, place_identity, score
from .profiler import (
    CollaborationMatrix,
    CollaborationProfile,
    TopTTable,
    accumulate,
    accumulate_batch,
    collaboration_matrix,
    export_heatmap,
    extract_top_t,
    merge,
    profile,
)
from .workload import TraceRecord, WorkloadSpec, generate, read_trace, write_trace

__version__ = "0.1.0"
