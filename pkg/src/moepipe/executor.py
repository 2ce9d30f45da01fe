"""Numeric reference execution of an MoE layer in naive and tile order.

Matrices are plain float64 ndarrays (row-major).  Both execution paths are
built from the same two primitives: a full-width vector-matrix product for a
token's hidden row, and a per-output-column dot product for the second GEMM.
Because tile execution only changes *when* each (token, expert, column)
element is produced, never how, the rescheduled result is bitwise identical
to the naive one.  The combine is an unweighted sum over each token's experts
in ascending id order (a gate-weight hook exists but defaults to off), and
the activation between the two GEMMs defaults to identity so equivalence
claims stay exact.

This is a correctness oracle, not a fast path; performance is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ConfigurationError, ModelConfig, ParallelSpec
from .resolver import TileSchedule, validate_schedule
from .routing import RoutingTable

Activation = Optional[Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class ExpertWeights:
    """Per-expert weights: ``w0[e]`` of shape (N, K) and ``w1[e]`` of (K, N)."""

    w0: np.ndarray
    w1: np.ndarray

    def __post_init__(self) -> None:
        if self.w0.ndim != 3 or self.w1.ndim != 3:
            raise ConfigurationError("expert weights must be stacked [E, ., .] arrays")
        e0, n, k = self.w0.shape
        e1, k1, n1 = self.w1.shape
        if e0 != e1 or n != n1 or k != k1:
            raise ConfigurationError(
                f"inconsistent weight shapes {self.w0.shape} / {self.w1.shape}"
            )

    @property
    def num_experts(self) -> int:
        return self.w0.shape[0]

    def check_model(self, model: ModelConfig) -> None:
        e, n, k = self.w0.shape
        if (e, n, k) != (model.E, model.N, model.K):
            raise ConfigurationError(
                f"weights shaped for (E={e}, N={n}, K={k}), model wants "
                f"(E={model.E}, N={model.N}, K={model.K})"
            )

    def shard_along_k(self, tp: int) -> List["ExpertWeights"]:
        """Split the hidden dimension into ``tp`` contiguous shards.

        Concatenating the shards along K reconstructs the originals exactly.
        """
        k = self.w0.shape[2]
        if k % tp != 0:
            raise ConfigurationError(f"K={k} is not divisible by tp={tp}")
        size = k // tp
        return [
            ExpertWeights(
                w0=self.w0[:, :, s * size : (s + 1) * size].copy(),
                w1=self.w1[:, s * size : (s + 1) * size, :].copy(),
            )
            for s in range(tp)
        ]


def random_weights(model: ModelConfig, seed: int = 0) -> ExpertWeights:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(model.N)
    return ExpertWeights(
        w0=rng.standard_normal((model.E, model.N, model.K)) * scale,
        w1=rng.standard_normal((model.E, model.K, model.N)) * scale,
    )


def _hidden_row(x_row: np.ndarray, w0_e: np.ndarray, activation: Activation) -> np.ndarray:
    h = np.dot(x_row, w0_e)
    if activation is not None:
        h = activation(h)
    return h


def _output_columns(h_row: np.ndarray, w1_e: np.ndarray, col_start: int, col_stop: int) -> np.ndarray:
    # One dot per output column: the per-element arithmetic (and therefore the
    # rounding) is independent of how columns are grouped into tiles.
    return np.array(
        [np.dot(h_row, w1_e[:, j]) for j in range(col_start, col_stop)],
        dtype=np.float64,
    )


def _combine(
    routing: RoutingTable,
    contrib: Dict[Tuple[int, int], np.ndarray],
    combine_weights: Optional[np.ndarray],
) -> np.ndarray:
    """Sum each token's per-expert rows in ascending expert order."""
    m = routing.workload.M
    n = routing.model.N
    out = np.zeros((m, n), dtype=np.float64)
    for t, experts in enumerate(routing.experts_per_token):
        acc = None
        for slot, e in enumerate(experts):
            row = contrib[(t, e)]
            if combine_weights is not None:
                row = row * combine_weights[t, slot]
            acc = row.copy() if acc is None else acc + row
        if acc is not None:
            out[t] = acc
    return out


def _check_input(x: np.ndarray, routing: RoutingTable) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (routing.workload.M, routing.model.N):
        raise ConfigurationError(
            f"input must be shaped (M={routing.workload.M}, N={routing.model.N}), got {x.shape}"
        )
    return x


def execute_naive(
    x: np.ndarray,
    weights: ExpertWeights,
    routing: RoutingTable,
    activation: Activation = None,
    combine_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Token-major execution: for each token, both GEMMs per expert, then combine."""
    x = _check_input(x, routing)
    weights.check_model(routing.model)
    n = routing.model.N
    contrib: Dict[Tuple[int, int], np.ndarray] = {}
    for t, experts in enumerate(routing.experts_per_token):
        for e in experts:
            h = _hidden_row(x[t], weights.w0[e], activation)
            contrib[(t, e)] = _output_columns(h, weights.w1[e], 0, n)
    return _combine(routing, contrib, combine_weights)


def _as_schedule_list(
    scheds: Union[TileSchedule, Sequence[TileSchedule]]
) -> List[TileSchedule]:
    if isinstance(scheds, TileSchedule):
        return [scheds]
    return list(scheds)


def _check_schedules(
    scheds0: List[TileSchedule],
    scheds1: List[TileSchedule],
    routing: RoutingTable,
) -> None:
    parallel = routing.parallel
    for sched in (*scheds0, *scheds1):
        violations = validate_schedule(sched, routing)
        if violations:
            raise ConfigurationError(
                f"schedule for rank {sched.rank} is invalid: {violations[0].message}"
            )
    for scheds, layer in ((scheds0, 0), (scheds1, 1)):
        groups = [parallel.ep_group_of_rank(s.rank) for s in scheds]
        if sorted(groups) != list(range(parallel.ep)):
            raise ConfigurationError(
                f"layer{layer} schedules must cover each EP group exactly once, "
                f"got groups {sorted(groups)}"
            )


def execute_scheduled(
    x: np.ndarray,
    weights: ExpertWeights,
    routing: RoutingTable,
    scheds0: Union[TileSchedule, Sequence[TileSchedule]],
    scheds1: Union[TileSchedule, Sequence[TileSchedule]],
    activation: Activation = None,
    combine_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Execute tiles in schedule order; bitwise identical to ``execute_naive``.

    ``scheds0``/``scheds1`` hold one schedule per EP group (any representative
    rank of the group).  Schedules must validate clean against the routing.
    """
    x = _check_input(x, routing)
    weights.check_model(routing.model)
    scheds0 = _as_schedule_list(scheds0)
    scheds1 = _as_schedule_list(scheds1)
    _check_schedules(scheds0, scheds1, routing)

    hidden: Dict[Tuple[int, int], np.ndarray] = {}
    for sched in scheds0:
        for tile in sched.tiles:
            for t, _src in tile.rows:
                hidden[(t, tile.expert)] = _hidden_row(
                    x[t], weights.w0[tile.expert], activation
                )

    contrib: Dict[Tuple[int, int], np.ndarray] = {}
    for sched in scheds1:
        for tile in sched.tiles:
            for t, _src in tile.rows:
                key = (t, tile.expert)
                if key not in contrib:
                    contrib[key] = np.empty(routing.model.N, dtype=np.float64)
                contrib[key][tile.col_start : tile.col_stop] = _output_columns(
                    hidden[key], weights.w1[tile.expert], tile.col_start, tile.col_stop
                )
    return _combine(routing, contrib, combine_weights)


def execute_tp_sharded(
    x: np.ndarray,
    weights: ExpertWeights,
    routing: RoutingTable,
    tp: int,
    activation: Activation = None,
    combine_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Execute with K split into ``tp`` shards, summing partials rank-ascending.

    The split changes the order in which the K axis is accumulated, so the
    result matches the unsharded one only to floating-point tolerance.
    """
    x = _check_input(x, routing)
    weights.check_model(routing.model)
    shards = weights.shard_along_k(tp)
    n = routing.model.N
    contrib: Dict[Tuple[int, int], np.ndarray] = {}
    for t, experts in enumerate(routing.experts_per_token):
        for e in experts:
            acc = np.zeros(n, dtype=np.float64)
            for shard in shards:
                h = _hidden_row(x[t], shard.w0[e], activation)
                acc = acc + _output_columns(h, shard.w1[e], 0, n)
            contrib[(t, e)] = acc
    return _combine(routing, contrib, combine_weights)
