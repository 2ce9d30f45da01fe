"""Synthetic top-k gate routing with controllable per-expert imbalance.

The generator draws per-expert logits from a unit Gaussian, scales them by a
temperature, and converts the resulting softmax shares into exact per-expert
token counts (largest-remainder apportionment, capped at one slot per token
per expert).  The temperature is bisected until the population standard
deviation of the count fractions matches the requested target.  Tokens are
then dealt to experts with a deterministic max-remaining-count greedy that
guarantees ``topk`` distinct experts per token.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    canonical_json,
    expert_placement,
    validate_sharding,
)


class InfeasibleStdError(ConfigurationError):
    """Requested imbalance exceeds what (E, topk) can express."""

    def __init__(self, requested: float, achievable: float):
        self.requested = requested
        self.achievable = achievable
        super().__init__(
            f"target std {requested:.6g} is infeasible; the maximum achievable "
            f"std for this (E, topk) is {achievable:.6g} (all tokens on the "
            f"same topk experts)"
        )


def max_achievable_std(E: int, topk: int) -> float:
    """Largest possible fraction std: every token routed to the same experts."""
    if not 1 <= topk <= E:
        raise ConfigurationError(f"topk must be in [1, {E}], got {topk}")
    return math.sqrt((E - topk) / topk) / E


def fraction_std(counts: Sequence[int]) -> float:
    """Population std of per-expert token fractions for a count vector."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    return float(np.std(counts / total))


@dataclass(frozen=True)
class RoutingTable:
    """Per-token expert assignments plus the derived placement bookkeeping.

    ``experts_per_token[t]`` lists the ``topk`` distinct expert ids of token
    ``t`` in ascending order; the combine reduction follows this order.
    Tokens are pre-distributed contiguously over ranks (remainder on the
    last rank).
    """

    model: ModelConfig
    parallel: ParallelSpec
    workload: WorkloadSpec
    experts_per_token: Tuple[Tuple[int, ...], ...]
    achieved_std: float

    @cached_property
    def expert_counts(self) -> Tuple[int, ...]:
        counts = [0] * self.model.E
        for experts in self.experts_per_token:
            for e in experts:
                counts[e] += 1
        return tuple(counts)

    def source_rank_of(self, token: int) -> int:
        if not 0 <= token < self.workload.M:
            raise ConfigurationError(
                f"token {token} out of range [0, {self.workload.M})"
            )
        w = self.parallel.world_size
        base = self.workload.M // w
        if base == 0:
            return w - 1
        return min(token // base, w - 1)

    def token_range_of_rank(self, rank: int) -> Tuple[int, int]:
        """Half-open token index range pre-distributed to ``rank``."""
        w = self.parallel.world_size
        self.parallel._check_rank(rank)
        base = self.workload.M // w
        start = rank * base
        stop = (rank + 1) * base if rank < w - 1 else self.workload.M
        return start, stop

    @cached_property
    def transfer_counts(self) -> Tuple[Tuple[int, ...], ...]:
        """Row-transfer matrix: [src rank][dst rank] -> received (token, expert) rows."""
        w = self.parallel.world_size
        placement = expert_placement(self.model, self.parallel)
        matrix = [[0] * w for _ in range(w)]
        for t, experts in enumerate(self.experts_per_token):
            src = self.source_rank_of(t)
            for e in experts:
                for dst in placement[e]:
                    matrix[src][dst] += 1
        return tuple(tuple(row) for row in matrix)

    def to_json_dict(self) -> dict:
        return {
            "model": self.model.to_json_dict(),
            "parallel": self.parallel.to_json_dict(),
            "workload": self.workload.to_json_dict(),
            "achieved_std": self.achieved_std,
            "experts_per_token": [list(e) for e in self.experts_per_token],
        }

    def to_json_str(self) -> str:
        return canonical_json(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, data: dict) -> "RoutingTable":
        table = cls(
            model=ModelConfig.from_json_dict(data["model"]),
            parallel=ParallelSpec.from_json_dict(data["parallel"]),
            workload=WorkloadSpec.from_json_dict(data["workload"]),
            experts_per_token=tuple(
                tuple(int(e) for e in experts)
                for experts in data["experts_per_token"]
            ),
            achieved_std=float(data["achieved_std"]),
        )
        table.validate()
        return table

    def validate(self) -> None:
        m = self.workload.M
        if len(self.experts_per_token) != m:
            raise ConfigurationError(
                f"expected {m} token entries, got {len(self.experts_per_token)}"
            )
        for t, experts in enumerate(self.experts_per_token):
            if len(experts) != self.model.topk:
                raise ConfigurationError(f"token {t} lists {len(experts)} experts")
            if len(set(experts)) != len(experts):
                raise ConfigurationError(f"token {t} lists duplicate experts")
            if list(experts) != sorted(experts):
                raise ConfigurationError(f"token {t} expert list is not sorted")
            for e in experts:
                if not 0 <= e < self.model.E:
                    raise ConfigurationError(f"token {t} routes to bad expert {e}")
        if sum(self.expert_counts) != m * self.model.topk:
            raise ConfigurationError("expert counts do not sum to M * topk")


def _capped_shares(logits: np.ndarray, tau: float, total: int, cap: int) -> np.ndarray:
    """Real-valued per-expert shares of ``total`` proportional to
    ``softmax(tau * logits)``, waterfilled against the per-expert ``cap``.

    The softmax is recomputed over the still-uncapped experts each round so
    the cascade stays well-defined even when ``tau`` drives it to one-hot.
    """
    e_count = len(logits)
    shares = np.zeros(e_count, dtype=np.float64)
    active = list(range(e_count))
    remaining = float(total)
    while active:
        z = tau * logits[active]
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        q = p * remaining
        over = [i for i, a in enumerate(active) if q[i] > cap]
        if not over:
            for i, a in enumerate(active):
                shares[a] = q[i]
            return shares
        for i in over:
            shares[active[i]] = cap
            remaining -= cap
        active = [a for i, a in enumerate(active) if i not in set(over)]
    if remaining > 1e-9:
        raise ConfigurationError("cannot place all token slots under the cap")
    return shares


def _apportion(shares: np.ndarray, total: int, cap: int) -> List[int]:
    """Largest-remainder rounding of real shares to integer counts <= cap."""
    base = np.floor(shares).astype(np.int64)
    base = np.minimum(base, cap)
    remainder = total - int(base.sum())
    frac = shares - base
    order = sorted(range(len(shares)), key=lambda e: (-frac[e], e))
    counts = base.tolist()
    while remainder > 0:
        progressed = False
        for e in order:
            if remainder == 0:
                break
            if counts[e] < cap:
                counts[e] += 1
                remainder -= 1
                progressed = True
        if not progressed:
            raise ConfigurationError("apportionment stuck: every expert at cap")
    return counts


def _counts_for_temperature(
    logits: np.ndarray, tau: float, total: int, cap: int
) -> List[int]:
    return _apportion(_capped_shares(logits, tau, total, cap), total, cap)


def _solve_counts(
    E: int, topk: int, M: int, target_std: float, logits: np.ndarray
) -> List[int]:
    """Bisect the logit temperature until the fraction std hits the target."""
    total = M * topk
    cap = M
    if total == 0:
        return [0] * E
    uniform = _counts_for_temperature(logits, 0.0, total, cap)
    if target_std <= fraction_std(uniform):
        return uniform

    def evaluate(tau: float) -> Tuple[float, List[int]]:
        counts = _counts_for_temperature(logits, tau, total, cap)
        return fraction_std(counts), counts

    lo, hi = 0.0, 1.0
    std_hi, counts_hi = evaluate(hi)
    while std_hi < target_std and hi < 1e9:
        hi *= 2
        std_hi, counts_hi = evaluate(hi)
    best = (abs(std_hi - target_std), counts_hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        std_mid, counts_mid = evaluate(mid)
        if abs(std_mid - target_std) < best[0]:
            best = (abs(std_mid - target_std), counts_mid)
        if std_mid < target_std:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return best[1]


def _assign_tokens(
    counts: Sequence[int], M: int, topk: int, rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    """Deal tokens to experts realizing ``counts`` exactly.

    Tokens are visited in a seeded random order; each takes the ``topk``
    experts with the largest remaining counts (ties toward smaller ids).
    Because every count is at most the number of unassigned tokens, the
    greedy never runs out of distinct experts.
    """
    heap = [(-c, e) for e, c in enumerate(counts) if c > 0]
    heapq.heapify(heap)
    assignment: List[Tuple[int, ...]] = [()] * M
    for t in rng.permutation(M):
        picked = [heapq.heappop(heap) for _ in range(topk)]
        assignment[int(t)] = tuple(sorted(e for _, e in picked))
        for neg_c, e in picked:
            if neg_c + 1 < 0:
                heapq.heappush(heap, (neg_c + 1, e))
    return assignment


def build_routing(
    model: ModelConfig, parallel: ParallelSpec, workload: WorkloadSpec
) -> RoutingTable:
    """Generate a deterministic routing table matching the workload's target std."""
    validate_sharding(model, parallel)
    limit = max_achievable_std(model.E, model.topk)
    if workload.std > limit + 1e-12:
        raise InfeasibleStdError(workload.std, limit)

    rng = np.random.default_rng(workload.seed)
    logits = rng.standard_normal(model.E)
    if model.E > 1 and float(np.ptp(logits)) == 0.0:
        logits = np.arange(model.E, dtype=np.float64)

    counts = _solve_counts(model.E, model.topk, workload.M, workload.std, logits)
    assignment = _assign_tokens(counts, workload.M, model.topk, rng)
    table = RoutingTable(
        model=model,
        parallel=parallel,
        workload=workload,
        experts_per_token=tuple(assignment),
        achieved_std=fraction_std(counts),
    )
    table.validate()
    return table
