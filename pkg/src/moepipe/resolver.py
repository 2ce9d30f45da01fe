"""Shared-tensor dependency resolving: decompose, sort, and reschedule tiles.

The buffer between the dispatch communication and the first expert GEMM (and
between the second GEMM and the combine) has global shape ``(M * topk, N)``.
For the communication->computation pipeline it can only be decomposed along
the token rows; for the computation->communication pipeline only along the
embedding columns.  This module splits each rank's share of that buffer into
GEMM-friendly tiles, attaches the exact set of remote-token arrivals gating
each tile, and orders tiles so computation can start before communication
finishes: locality-first for the row pipeline, column-wave order for the
column pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .config import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    WorkloadSpec,
    canonical_json,
    experts_on_rank,
)
from .routing import RoutingTable

M_DIM = "M"
N_DIM = "N"

DEFAULT_TILE_ROWS = 128


def default_tile_cols(n_embed: int) -> int:
    """Column tile size giving at least four column waves when possible."""
    if n_embed >= 512:
        return 128
    return max(1, n_embed // 4)


@dataclass(frozen=True)
class SharedTensorMeta:
    """Shape and tiling of the buffer linking a pipeline's two operators."""

    global_rows: int
    cols: int
    decomposed_dim: str
    tile_rows: int = DEFAULT_TILE_ROWS
    tile_cols: int = 0

    def __post_init__(self) -> None:
        if self.decomposed_dim not in (M_DIM, N_DIM):
            raise ConfigurationError(
                f"decomposed_dim must be {M_DIM!r} or {N_DIM!r}, got {self.decomposed_dim!r}"
            )
        if self.global_rows < 0 or self.cols < 1:
            raise ConfigurationError("invalid shared tensor shape")
        if self.tile_rows < 1:
            raise ConfigurationError(f"tile_rows must be >= 1, got {self.tile_rows}")
        if self.decomposed_dim == N_DIM:
            if not 1 <= self.tile_cols <= self.cols:
                raise ConfigurationError(
                    f"tile_cols must be in [1, {self.cols}], got {self.tile_cols}"
                )

    def col_blocks(self) -> int:
        if self.decomposed_dim != N_DIM:
            return 1
        return -(-self.cols // self.tile_cols)


def meta_for_layer0(
    model: ModelConfig, workload: WorkloadSpec, tile_rows: int = DEFAULT_TILE_ROWS
) -> SharedTensorMeta:
    return SharedTensorMeta(
        global_rows=workload.M * model.topk,
        cols=model.N,
        decomposed_dim=M_DIM,
        tile_rows=tile_rows,
    )


def meta_for_layer1(
    model: ModelConfig,
    workload: WorkloadSpec,
    tile_rows: int = DEFAULT_TILE_ROWS,
    tile_cols: Optional[int] = None,
) -> SharedTensorMeta:
    return SharedTensorMeta(
        global_rows=workload.M * model.topk,
        cols=model.N,
        decomposed_dim=N_DIM,
        tile_rows=tile_rows,
        tile_cols=tile_cols if tile_cols is not None else default_tile_cols(model.N),
    )


@dataclass(frozen=True)
class Tile:
    """One unit of GEMM work over a contiguous row slice of one expert's block.

    ``rows`` lists the (token id, source rank) pairs occupying the slice in
    sorted-layout order.  ``deps`` is the subset sourced from other ranks;
    those arrivals gate the tile's execution.  Column ranges are only set for
    the column-decomposed (second GEMM) pipeline.
    """

    tile_id: int
    layer: int
    expert: int
    row_start: int
    row_stop: int
    rows: Tuple[Tuple[int, int], ...]
    deps: frozenset
    col_start: int = 0
    col_stop: int = 0


@dataclass(frozen=True)
class ReduceChunk:
    """A column block of the combine reduction and the tiles it waits for."""

    chunk_id: int
    col_start: int
    col_stop: int
    prereq_tile_ids: frozenset


@dataclass(frozen=True)
class TileSchedule:
    """Ordered tiles (and, for the column pipeline, reduce chunks) of one rank."""

    rank: int
    layer: int
    meta: SharedTensorMeta
    tiles: Tuple[Tile, ...]
    reduce_chunks: Tuple[ReduceChunk, ...] = ()
    layout: Dict[int, Tuple[Tuple[int, int], ...]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "rank": self.rank,
            "layer": self.layer,
            "tile_rows": self.meta.tile_rows,
            "tile_cols": self.meta.tile_cols,
            "tiles": [
                {
                    "tile_id": t.tile_id,
                    "expert": t.expert,
                    "rows": [t.row_start, t.row_stop],
                    "cols": [t.col_start, t.col_stop] if self.layer == 1 else None,
                    "deps": sorted(list(d) for d in t.deps),
                }
                for t in self.tiles
            ],
            "reduce_chunks": [
                {
                    "chunk_id": c.chunk_id,
                    "cols": [c.col_start, c.col_stop],
                    "prereq_tile_ids": sorted(c.prereq_tile_ids),
                }
                for c in self.reduce_chunks
            ],
        }

    def to_json_str(self) -> str:
        return canonical_json(self.to_json_dict())


def sort_tokens_by_source(
    routing: RoutingTable, rank: int
) -> Dict[int, Tuple[Tuple[int, int], ...]]:
    """Per-expert received-token layout, local tokens first.

    For every expert hosted on ``rank``, its (token id, source rank) rows are
    ordered by ring distance ``(source - rank) mod W`` and then token id, so
    locally available rows form a prefix of the block.
    """
    parallel = routing.parallel
    parallel._check_rank(rank)
    world = parallel.world_size
    layout: Dict[int, List[Tuple[int, int]]] = {
        e: [] for e in experts_on_rank(routing.model, parallel, rank)
    }
    for t, experts in enumerate(routing.experts_per_token):
        src = routing.source_rank_of(t)
        for e in experts:
            if e in layout:
                layout[e].append((t, src))
    result: Dict[int, Tuple[Tuple[int, int], ...]] = {}
    for e, rows in layout.items():
        rows.sort(key=lambda row: ((row[1] - rank) % world, row[0]))
        result[e] = tuple(rows)
    return result


def _row_chunks(n_rows: int, tile_rows: int) -> List[Tuple[int, int]]:
    return [(start, min(start + tile_rows, n_rows)) for start in range(0, n_rows, tile_rows)]


def _col_chunks(n_cols: int, tile_cols: int) -> List[Tuple[int, int]]:
    return [(start, min(start + tile_cols, n_cols)) for start in range(0, n_cols, tile_cols)]


def resolve_layer0(
    routing: RoutingTable, rank: int, meta: SharedTensorMeta
) -> TileSchedule:
    """Tile the dispatch->GEMM pipeline and order tiles locality-first.

    Each expert's sorted block is cut into ``tile_rows``-row tiles (ragged
    tail allowed).  Tiles are scheduled by ascending remote-dependency count,
    ties broken by (expert id, row start), so fully local tiles run while
    remote rows are still in flight.
    """
    if meta.decomposed_dim != M_DIM:
        raise ConfigurationError(
            "the dispatch->GEMM pipeline can only be decomposed along the token "
            "rows; column decomposition is not feasible for a GEMM input"
        )
    layout = sort_tokens_by_source(routing, rank)
    tiles: List[Tile] = []
    for e in sorted(layout):
        rows = layout[e]
        for row_start, row_stop in _row_chunks(len(rows), meta.tile_rows):
            chunk = rows[row_start:row_stop]
            deps = frozenset((t, src) for t, src in chunk if src != rank)
            tiles.append(
                Tile(
                    tile_id=-1,
                    layer=0,
                    expert=e,
                    row_start=row_start,
                    row_stop=row_stop,
                    rows=chunk,
                    deps=deps,
                )
            )
    tiles.sort(key=lambda t: (len(t.deps), t.expert, t.row_start))
    ordered = tuple(
        Tile(
            tile_id=i,
            layer=0,
            expert=t.expert,
            row_start=t.row_start,
            row_stop=t.row_stop,
            rows=t.rows,
            deps=t.deps,
        )
        for i, t in enumerate(tiles)
    )
    return TileSchedule(rank=rank, layer=0, meta=meta, tiles=ordered, layout=layout)


def resolve_layer1(
    routing: RoutingTable, rank: int, meta: SharedTensorMeta
) -> TileSchedule:
    """Tile the GEMM->combine pipeline column-wise with per-column reduces.

    Tiles are emitted column block by column block (experts, then row tiles,
    inside each block), so the first ``tile_cols`` output columns of every
    expert finish before any expert's second block starts.  Reduce chunk
    ``c`` becomes ready exactly when all column-``c`` tiles complete.
    """
    if meta.decomposed_dim != N_DIM:
        raise ConfigurationError(
            "the GEMM->combine pipeline can only be decomposed along the "
            "embedding columns; token rows are coupled by the topk reduction"
        )
    layout = sort_tokens_by_source(routing, rank)
    tiles: List[Tile] = []
    chunk_tiles: Dict[int, List[int]] = {}
    col_ranges = _col_chunks(meta.cols, meta.tile_cols)
    tile_id = 0
    for chunk_id, (col_start, col_stop) in enumerate(col_ranges):
        chunk_tiles[chunk_id] = []
        for e in sorted(layout):
            rows = layout[e]
            for row_start, row_stop in _row_chunks(len(rows), meta.tile_rows):
                chunk = rows[row_start:row_stop]
                deps = frozenset((t, src) for t, src in chunk if src != rank)
                tiles.append(
                    Tile(
                        tile_id=tile_id,
                        layer=1,
                        expert=e,
                        row_start=row_start,
                        row_stop=row_stop,
                        rows=chunk,
                        deps=deps,
                        col_start=col_start,
                        col_stop=col_stop,
                    )
                )
                chunk_tiles[chunk_id].append(tile_id)
                tile_id += 1
    reduces = tuple(
        ReduceChunk(
            chunk_id=chunk_id,
            col_start=col_start,
            col_stop=col_stop,
            prereq_tile_ids=frozenset(chunk_tiles[chunk_id]),
        )
        for chunk_id, (col_start, col_stop) in enumerate(col_ranges)
    )
    return TileSchedule(
        rank=rank, layer=1, meta=meta, tiles=tuple(tiles), reduce_chunks=reduces,
        layout=layout,
    )


@dataclass(frozen=True)
class Violation:
    """One schedule defect found by the validator."""

    code: str
    subject: Optional[int]
    message: str


def _expected_cover(
    routing: RoutingTable, rank: int, meta: SharedTensorMeta
) -> Dict[Tuple[int, int, int, int, int], Tuple[Tuple[Tuple[int, int], ...], frozenset]]:
    """Expected tile key -> (rows, deps) map derived directly from the routing."""
    layout = sort_tokens_by_source(routing, rank)
    expected = {}
    col_ranges = (
        _col_chunks(meta.cols, meta.tile_cols)
        if meta.decomposed_dim == N_DIM
        else [(0, 0)]
    )
    for e in sorted(layout):
        rows = layout[e]
        for row_start, row_stop in _row_chunks(len(rows), meta.tile_rows):
            chunk = rows[row_start:row_stop]
            deps = frozenset((t, src) for t, src in chunk if src != rank)
            for col_start, col_stop in col_ranges:
                expected[(e, row_start, row_stop, col_start, col_stop)] = (chunk, deps)
    return expected


def validate_schedule(
    schedule: TileSchedule, routing: RoutingTable, rank: Optional[int] = None
) -> List[Violation]:
    """Check a schedule against the routing; returns an empty list when clean.

    Detects missing/duplicated tiles, dependency sets that disagree with the
    sorted layout (including tokens never routed to the tile's expert), and
    reduce chunks that would fire before one of their column's tiles.
    """
    if rank is None:
        rank = schedule.rank
    violations: List[Violation] = []
    if rank != schedule.rank:
        violations.append(
            Violation("rank-mismatch", None, f"schedule built for rank {schedule.rank}, validated against {rank}")
        )
        return violations

    expected = _expected_cover(routing, rank, schedule.meta)
    seen: Dict[Tuple[int, int, int, int, int], int] = {}
    routed = {
        (t, e)
        for t, experts in enumerate(routing.experts_per_token)
        for e in experts
    }
    for tile in schedule.tiles:
        key = (tile.expert, tile.row_start, tile.row_stop, tile.col_start, tile.col_stop)
        if key in seen:
            violations.append(
                Violation("duplicate-tile", tile.tile_id, f"tile {key} appears more than once")
            )
            continue
        seen[key] = tile.tile_id
        if key not in expected:
            violations.append(
                Violation("unexpected-tile", tile.tile_id, f"tile {key} not part of the cover")
            )
            continue
        rows, deps = expected[key]
        if tile.rows != rows:
            violations.append(
                Violation("bad-rows", tile.tile_id, f"tile {key} rows disagree with the sorted layout")
            )
        if tile.deps != deps:
            violations.append(
                Violation("bad-deps", tile.tile_id, f"tile {key} dependency set is not exactly its remote rows")
            )
        for t, src in tile.deps:
            if (t, tile.expert) not in routed:
                violations.append(
                    Violation("unrouted-dep", tile.tile_id, f"token {t} is not routed to expert {tile.expert}")
                )
    for key in expected:
        if key not in seen:
            violations.append(
                Violation("missing-tile", None, f"tile {key} missing from the schedule")
            )

    if schedule.layer == 1 or schedule.reduce_chunks:
        col_ranges = _col_chunks(schedule.meta.cols, schedule.meta.tile_cols)
        by_id = {t.tile_id: t for t in schedule.tiles}
        expected_chunks = len(col_ranges)
        if len(schedule.reduce_chunks) != expected_chunks:
            violations.append(
                Violation(
                    "bad-reduce-count",
                    None,
                    f"expected {expected_chunks} reduce chunks, got {len(schedule.reduce_chunks)}",
                )
            )
        last = -1
        for chunk in schedule.reduce_chunks:
            if chunk.chunk_id <= last:
                violations.append(
                    Violation("reduce-order", chunk.chunk_id, "reduce chunks not emitted in ascending column order")
                )
            last = chunk.chunk_id
            expected_ids = {
                t.tile_id
                for t in schedule.tiles
                if (t.col_start, t.col_stop) == (chunk.col_start, chunk.col_stop)
            }
            if not expected_ids >= chunk.prereq_tile_ids:
                violations.append(
                    Violation("alien-prereq", chunk.chunk_id, "reduce chunk lists a prerequisite outside its column block")
                )
            if not chunk.prereq_tile_ids >= expected_ids:
                violations.append(
                    Violation(
                        "premature-reduce",
                        chunk.chunk_id,
                        "reduce chunk would fire before all of its column's tiles complete",
                    )
                )
            for tid in chunk.prereq_tile_ids:
                if tid not in by_id:
                    violations.append(
                        Violation("unknown-prereq", chunk.chunk_id, f"prerequisite tile {tid} not in schedule")
                    )
    return violations
