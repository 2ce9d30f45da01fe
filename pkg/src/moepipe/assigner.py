"""Profile-and-select machinery for the compute/communication block split.

The optimal division point depends on the token count and the parallel
strategy, so it is profiled ahead of time: ``sweep_split`` simulates a
configuration across candidate ``n_c`` values and records the argmin plus
the whole sweep curve as metadata.  At run time ``select_split`` answers
queries from that metadata, matching the token count to the nearest profiled
power-of-two bucket and refusing (rather than guessing) when nothing
compatible was profiled.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .config import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    canonical_json,
)
from .resolver import (
    DEFAULT_TILE_ROWS,
    meta_for_layer0,
    meta_for_layer1,
    resolve_layer0,
    resolve_layer1,
)
from .routing import build_routing
from .simulator import CostModel, KernelSplit, simulate_fine, split_for, _validate_pair


class UnprofiledConfigError(ConfigurationError):
    """No profiled record is compatible with the queried configuration."""


@dataclass(frozen=True)
class SplitKey:
    """Identity of one profiled configuration; ``m`` is the token count bucket."""

    m: int
    tp: int
    ep: int
    experts: int
    topk: int
    embed: int
    hidden: int
    cost: str
    blocks: int

    def compatible(self, other: "SplitKey") -> bool:
        """Same in every coordinate except the token bucket."""
        return (
            self.tp == other.tp
            and self.ep == other.ep
            and self.experts == other.experts
            and self.topk == other.topk
            and self.embed == other.embed
            and self.hidden == other.hidden
            and self.cost == other.cost
            and self.blocks == other.blocks
        )

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "tp": self.tp,
            "ep": self.ep,
            "experts": self.experts,
            "topk": self.topk,
            "embed": self.embed,
            "hidden": self.hidden,
            "cost": self.cost,
            "blocks": self.blocks,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SplitKey":
        return cls(
            m=int(data["m"]),
            tp=int(data["tp"]),
            ep=int(data["ep"]),
            experts=int(data["experts"]),
            topk=int(data["topk"]),
            embed=int(data["embed"]),
            hidden=int(data["hidden"]),
            cost=str(data["cost"]),
            blocks=int(data["blocks"]),
        )

    @classmethod
    def for_config(
        cls,
        model: ModelConfig,
        parallel: ParallelSpec,
        m_tokens: int,
        cost_name: str,
        blocks: int,
    ) -> "SplitKey":
        return cls(
            m=m_tokens,
            tp=parallel.tp,
            ep=parallel.ep,
            experts=model.E,
            topk=model.topk,
            embed=model.N,
            hidden=model.K,
            cost=cost_name,
            blocks=blocks,
        )


@dataclass(frozen=True)
class SplitRecord:
    """Sweep outcome for one configuration: the curve and its argmin."""

    key: SplitKey
    optimal_nc: int
    latency_ns: int
    curve: Tuple[Tuple[int, int], ...]  # (n_c, latency_ns), ascending n_c

    def __post_init__(self) -> None:
        if not self.curve:
            raise ConfigurationError("sweep curve is empty")
        best = min(self.curve, key=lambda point: (point[1], point[0]))
        if (self.optimal_nc, self.latency_ns) != best:
            raise ConfigurationError(
                "stored optimum is not the argmin of the stored curve"
            )

    def to_json_dict(self) -> dict:
        return {
            "key": self.key.to_json_dict(),
            "optimal_nc": self.optimal_nc,
            "latency_ns": self.latency_ns,
            "curve": [list(point) for point in self.curve],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SplitRecord":
        return cls(
            key=SplitKey.from_json_dict(data["key"]),
            optimal_nc=int(data["optimal_nc"]),
            latency_ns=int(data["latency_ns"]),
            curve=tuple((int(nc), int(ns)) for nc, ns in data["curve"]),
        )


@dataclass
class SplitMetadata:
    """A flat store of profiled split records, persisted as one JSON file."""

    records: List[SplitRecord]

    def add(self, record: SplitRecord) -> None:
        self.records = [r for r in self.records if r.key != record.key]
        self.records.append(record)

    def to_json_str(self) -> str:
        ordered = sorted(
            self.records, key=lambda r: tuple(sorted(r.key.to_json_dict().items()))
        )
        return canonical_json(
            {"records": [record.to_json_dict() for record in ordered]}
        )

    @classmethod
    def from_json_str(cls, text: str) -> "SplitMetadata":
        data = json.loads(text)
        return cls(
            records=[SplitRecord.from_json_dict(r) for r in data.get("records", [])]
        )

    def save(self, path: str) -> None:
        """Whole-file atomic replace so readers never see a partial write."""
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as handle:
                handle.write(self.to_json_str())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "SplitMetadata":
        with open(path, "r") as handle:
            return cls.from_json_str(handle.read())


def _candidate_ncs(blocks: int, stride: int) -> List[int]:
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    ncs = list(range(1, blocks, stride))
    if ncs[-1] != blocks - 1:
        ncs.append(blocks - 1)
    return ncs


def _sweep_point(args) -> Tuple[int, int]:
    sched0, sched1, routing, cost, blocks, n_c = args
    result = simulate_fine(
        sched0, sched1, routing, cost, split_for(blocks, n_c), validate=False
    )
    return n_c, result.total_latency_ns


def sweep_split(
    model: ModelConfig,
    parallel: ParallelSpec,
    workload: WorkloadSpec,
    cost: CostModel,
    cost_name: str,
    blocks: Optional[int] = None,
    stride: int = 1,
    rank: int = 0,
    tile_rows: int = DEFAULT_TILE_ROWS,
    tile_cols: Optional[int] = None,
    jobs: int = 1,
) -> SplitRecord:
    """Simulate every candidate split for one configuration on ``rank``.

    The sweep covers ``n_c`` in [1, blocks-1] with the given stride (the last
    candidate is always included) and records the global argmin, ties going
    to the smaller ``n_c``.  No unimodality is assumed.
    """
    if blocks is None:
        blocks = cost.blocks
    routing = build_routing(model, parallel, workload)
    sched0 = resolve_layer0(routing, rank, meta_for_layer0(model, workload, tile_rows))
    sched1 = resolve_layer1(
        routing, rank, meta_for_layer1(model, workload, tile_rows, tile_cols)
    )
    _validate_pair(sched0, sched1, routing)

    ncs = _candidate_ncs(blocks, stride)
    tasks = [(sched0, sched1, routing, cost, blocks, n_c) for n_c in ncs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(_sweep_point, tasks))
    else:
        points = [_sweep_point(task) for task in tasks]
    curve = tuple(sorted(points))
    optimal_nc, latency = min(curve, key=lambda point: (point[1], point[0]))
    key = SplitKey.for_config(model, parallel, workload.M, cost_name, blocks)
    return SplitRecord(
        key=key, optimal_nc=optimal_nc, latency_ns=latency, curve=curve
    )


def select_split(metadata: SplitMetadata, query: SplitKey) -> KernelSplit:
    """Pick the profiled split for a query configuration.

    An exact key match wins; otherwise the compatible record with the
    nearest token bucket (log2 distance, ties toward the smaller bucket) is
    used.  A query with no compatible record raises ``UnprofiledConfigError``
    rather than silently defaulting.
    """
    if not metadata.records:
        raise UnprofiledConfigError("split metadata is empty")
    compatible = [r for r in metadata.records if r.key.compatible(query)]
    if not compatible:
        raise UnprofiledConfigError(
            f"unprofiled configuration: no record matches {query.to_json_dict()} "
            "in every field but the token count"
        )
    exact = [r for r in compatible if r.key.m == query.m]
    if exact:
        chosen = exact[0]
    else:
        if query.m < 1:
            raise UnprofiledConfigError(
                f"cannot bucket a token count of {query.m}; profile it explicitly"
            )

        def distance(record: SplitRecord) -> Tuple[float, int]:
            return (
                abs(math.log2(query.m) - math.log2(record.key.m)),
                record.key.m,
            )

        chosen = min(compatible, key=distance)
    return split_for(chosen.key.blocks, chosen.optimal_nc)
