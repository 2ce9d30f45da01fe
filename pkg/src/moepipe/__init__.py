"""Desk-scale study of communication/computation overlap in MoE layers.

The package covers the full loop: describe an MoE layer and its sharding
(``config``), generate routed workloads with controllable imbalance
(``routing``), decompose and reschedule the shared buffers into dependency-
tagged tile schedules (``resolver``), prove the rescheduling value-preserving
on small dense problems (``executor``), replay the schedules through a
deterministic discrete-event model of a block-specialized fused kernel
(``simulator``), and profile/select the compute-vs-communication block split
(``assigner``).
"""

from .config import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    MODEL_PRESETS,
    buffer_bytes,
    expert_placement,
    experts_on_rank,
    model_preset,
    validate_sharding,
)
from .routing import (
    InfeasibleStdError,
    RoutingTable,
    build_routing,
    fraction_std,
    max_achievable_std,
)
from .resolver import (
    DEFAULT_TILE_ROWS,
    M_DIM,
    N_DIM,
    ReduceChunk,
    SharedTensorMeta,
    Tile,
    TileSchedule,
    Violation,
    default_tile_cols,
    meta_for_layer0,
    meta_for_layer1,
    resolve_layer0,
    resolve_layer1,
    sort_tokens_by_source,
    validate_schedule,
)
from .executor import (
    ExpertWeights,
    execute_naive,
    execute_scheduled,
    execute_tp_sharded,
    random_weights,
)
from .simulator import (
    COST_PRESETS,
    CostModel,
    Interval,
    KernelSplit,
    SimResult,
    audit_timeline,
    cost_preset,
    latency_lower_bound,
    simulate_coarse,
    simulate_fine,
    split_for,
)
from .assigner import (
    SplitKey,
    SplitMetadata,
    SplitRecord,
    UnprofiledConfigError,
    select_split,
    sweep_split,
)

__version__ = "0.1.0"
