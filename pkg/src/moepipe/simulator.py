"""Deterministic discrete-event simulation of a thread-block-specialized kernel.

One rank's MoE layer is modeled as two resource pools: ``n_p`` compute blocks
that execute tiles in resolver order (claiming the earliest ready tile when
idle) and ``n_c`` communication blocks that serially work through statically
round-robin-assigned transfer tasks.  Inbound transfers are per received
token row; outbound combine traffic is one aggregated message per (reduce
chunk, destination rank), enqueued the instant the chunk's tiles finish.

A coarse-grained baseline reuses the same inbound rows and tiles but runs
them as a chunked recv -> compute -> send pipeline: rows are split into
contiguous chunks, each chunk pays a fixed partitioning overhead on top of
its tile work, and a token's combine row is sent with the chunk that
completes its last expert row.  ``chunks=1`` is fully sequential execution.

The clock is integer nanoseconds and every cost is rounded half-up once, so
identical inputs produce identical timelines byte for byte.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .config import ConfigurationError, ModelConfig, canonical_json
from .resolver import (
    SharedTensorMeta,
    Tile,
    TileSchedule,
    meta_for_layer0,
    meta_for_layer1,
    resolve_layer0,
    resolve_layer1,
    validate_schedule,
)
from .routing import RoutingTable


def _round_half_up_ns(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class KernelSplit:
    """Division of a fused kernel's ``n`` thread blocks into compute/comm roles."""

    n: int
    n_p: int
    n_c: int

    def __post_init__(self) -> None:
        if self.n_p < 1 or self.n_c < 1:
            raise ConfigurationError(
                f"both block pools need at least one block, got n_p={self.n_p}, n_c={self.n_c}"
            )
        if self.n_p + self.n_c != self.n:
            raise ConfigurationError(
                f"n_p + n_c must equal n: {self.n_p} + {self.n_c} != {self.n}"
            )


def split_for(n: int, n_c: int) -> KernelSplit:
    return KernelSplit(n=n, n_p=n - n_c, n_c=n_c)


@dataclass(frozen=True)
class CostModel:
    """Parametric timing of tiles and messages, per thread block.

    ``compute_flops_per_s`` is the throughput of a single compute block;
    bandwidths are per communication block.  A transfer rides the fast
    ``local`` link when its payload never leaves the destination's
    tensor-parallel replica group (inbound dispatch) or stays on the same
    rank (outbound combine); everything else pays the ``intra_node`` link.
    ``alpha_tile_s`` is the fixed cost of launching one tile (what makes
    over-fragmented GEMMs slow); ``chunk_overhead_s`` is the extra fixed
    cost each coarse-grained chunk pays.
    """

    compute_flops_per_s: float
    alpha_tile_s: float
    alpha_msg_s: float
    local_bytes_per_s: float
    intra_node_bytes_per_s: float
    chunk_overhead_s: float = 0.0
    blocks: int = 132

    def __post_init__(self) -> None:
        if self.compute_flops_per_s <= 0:
            raise ConfigurationError("compute rate must be > 0")
        if self.local_bytes_per_s <= 0 or self.intra_node_bytes_per_s <= 0:
            raise ConfigurationError("bandwidths must be > 0")
        if self.local_bytes_per_s < self.intra_node_bytes_per_s:
            raise ConfigurationError("local bandwidth must be >= intra-node bandwidth")
        if min(self.alpha_tile_s, self.alpha_msg_s, self.chunk_overhead_s) < 0:
            raise ConfigurationError("fixed overheads must be >= 0")
        if self.blocks < 2:
            raise ConfigurationError("need at least two thread blocks")

    def tile_ns(self, flops: float) -> int:
        return _round_half_up_ns(
            self.alpha_tile_s * 1e9 + flops * 1e9 / self.compute_flops_per_s
        )

    def msg_ns(self, nbytes: int, local: bool) -> int:
        bw = self.local_bytes_per_s if local else self.intra_node_bytes_per_s
        return _round_half_up_ns(self.alpha_msg_s * 1e9 + nbytes * 1e9 / bw)

    def chunk_overhead_ns(self) -> int:
        return _round_half_up_ns(self.chunk_overhead_s * 1e9)

    @staticmethod
    def token_bytes(model: ModelConfig) -> int:
        return model.N * model.dtype_bytes

    def to_json_dict(self) -> dict:
        return {
            "compute_flops_per_s": self.compute_flops_per_s,
            "alpha_tile_s": self.alpha_tile_s,
            "alpha_msg_s": self.alpha_msg_s,
            "local_bytes_per_s": self.local_bytes_per_s,
            "intra_node_bytes_per_s": self.intra_node_bytes_per_s,
            "chunk_overhead_s": self.chunk_overhead_s,
            "blocks": self.blocks,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CostModel":
        return cls(
            compute_flops_per_s=float(data["compute_flops_per_s"]),
            alpha_tile_s=float(data["alpha_tile_s"]),
            alpha_msg_s=float(data["alpha_msg_s"]),
            local_bytes_per_s=float(data["local_bytes_per_s"]),
            intra_node_bytes_per_s=float(data["intra_node_bytes_per_s"]),
            chunk_overhead_s=float(data.get("chunk_overhead_s", 0.0)),
            blocks=int(data.get("blocks", 132)),
        )


COST_PRESETS: Dict[str, CostModel] = {
    # NVLink-class box: fast links, compute-dominated MoE layers.
    "h800": CostModel(
        compute_flops_per_s=7.5e12,
        alpha_tile_s=12e-6,
        alpha_msg_s=3e-8,
        local_bytes_per_s=1.0e11,
        intra_node_bytes_per_s=5.0e9,
        chunk_overhead_s=40e-6,
        blocks=132,
    ),
    # PCIe-class box, ~25 GB/s GPU-to-GPU aggregate: bandwidth-limited regime.
    "l20": CostModel(
        compute_flops_per_s=1.3e12,
        alpha_tile_s=10e-6,
        alpha_msg_s=2e-7,
        local_bytes_per_s=2.0e11,
        intra_node_bytes_per_s=1.5e9,
        chunk_overhead_s=40e-6,
        blocks=92,
    ),
}


def cost_preset(name: str) -> CostModel:
    try:
        return COST_PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown cost preset {name!r}; available: {sorted(COST_PRESETS)}"
        ) from None


@dataclass(frozen=True)
class Interval:
    """One busy slot on one thread block (task_id -1 marks chunk overhead)."""

    block_id: int
    block_kind: str
    task_id: int
    start_ns: int
    end_ns: int


@dataclass(frozen=True)
class SimResult:
    """Timeline plus the latency/overlap metrics derived from it.

    ``comm_busy_ns``/``compute_busy_ns`` are union durations over wall time;
    ``exposed_comm_ns`` is the wall time with some transfer active and no
    compute block busy.  ``hidden_fraction`` is 1 minus the exposed share of
    the communication union (1.0 when there is no communication at all).
    ``bubble_ns`` maps each compute block to its idle time before the
    timeline ends.  ``*_work_ns`` are plain duration sums for conservation
    checks; chunk-overhead intervals count as busy time but not as work.
    """

    mode: str
    n_p: int
    n_c: int
    total_latency_ns: int
    intervals: Tuple[Interval, ...]
    comm_busy_ns: int
    compute_busy_ns: int
    exposed_comm_ns: int
    hidden_fraction: float
    comm_work_ns: int
    compute_work_ns: int
    bubble_ns: Tuple[Tuple[int, int], ...]

    @property
    def total_latency_us(self) -> float:
        return self.total_latency_ns / 1000.0

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_p": self.n_p,
            "n_c": self.n_c,
            "total_latency_ns": self.total_latency_ns,
            "total_latency_us": self.total_latency_ns / 1000.0,
            "comm_busy_ns": self.comm_busy_ns,
            "compute_busy_ns": self.compute_busy_ns,
            "exposed_comm_ns": self.exposed_comm_ns,
            "hidden_fraction": self.hidden_fraction,
            "comm_work_ns": self.comm_work_ns,
            "compute_work_ns": self.compute_work_ns,
            "bubble_ns": {str(block): ns for block, ns in self.bubble_ns},
        }

    def to_json_str(self) -> str:
        return canonical_json(self.to_json_dict())

    def timeline_csv(self) -> str:
        lines = ["block_id,block_kind,task_id,start_ns,end_ns"]
        ordered = sorted(
            self.intervals,
            key=lambda iv: (iv.start_ns, iv.block_id, iv.end_ns, iv.task_id),
        )
        for iv in ordered:
            lines.append(
                f"{iv.block_id},{iv.block_kind},{iv.task_id},{iv.start_ns},{iv.end_ns}"
            )
        return "\n".join(lines) + "\n"


def _union_measure(spans: List[Tuple[int, int]]) -> int:
    total = 0
    end = -1
    for start, stop in sorted(spans):
        if start > end:
            total += stop - start
            end = stop
        elif stop > end:
            total += stop - end
            end = stop
    return total


def _exposed_measure(
    spans: List[Tuple[int, int]], cover: List[Tuple[int, int]]
) -> int:
    """Measure of the ``spans`` union not covered by the ``cover`` union."""
    events: List[Tuple[int, int, int]] = []
    for start, stop in spans:
        if start < stop:
            events.append((start, 0, 1))
            events.append((stop, 0, -1))
    for start, stop in cover:
        if start < stop:
            events.append((start, 1, 1))
            events.append((stop, 1, -1))
    events.sort()
    exposed = 0
    active = covered = 0
    prev = 0
    for pos, which, delta in events:
        if active > 0 and covered == 0:
            exposed += pos - prev
        prev = pos
        if which == 0:
            active += delta
        else:
            covered += delta
    return exposed


# ---------------------------------------------------------------------------
# Task derivation shared by the fine engine, the coarse baseline, the lower
# bound and the timeline auditor.
# ---------------------------------------------------------------------------


@dataclass
class _CommTask:
    nbytes: int
    ns: int
    gated_tile: Optional[int]  # layer0 tile waiting on this arrival
    chunk: Optional[int]  # reduce chunk this send belongs to (fine outbound)


@dataclass
class _TaskGraph:
    rank: int
    tiles: List[Tile]  # combined order: layer0 schedule order, then layer1
    n_layer0: int
    tile_ns: List[int]
    inbound: List[_CommTask]  # one per received row, in schedule-demand order
    inbound_tile: List[int]  # inbound index -> owning layer0 tile
    outbound: List[_CommTask]  # fine combine sends: per (reduce chunk, dest)
    tile_pending_arrivals: List[int]
    tile_pending_tiles: List[int]
    tile_dependents: List[List[int]]  # layer0 tile -> layer1 tiles it feeds
    tile_producers: List[List[int]]  # layer1 tile -> its layer0 tiles
    tile_chunk: List[Optional[int]]  # layer1 tile -> its reduce chunk
    chunk_pending: List[int]
    chunk_sends: List[List[int]]  # reduce chunk -> outbound indices
    tile_arrival_sources: List[List[int]]  # layer0 tile -> inbound indices (remote)
    tokens_by_src: Dict[int, Set[int]]  # distinct tokens on rank, by source


def _build_task_graph(
    sched0: TileSchedule,
    sched1: TileSchedule,
    routing: RoutingTable,
    cost: CostModel,
) -> _TaskGraph:
    if sched0.rank != sched1.rank:
        raise ConfigurationError("layer0/layer1 schedules must target the same rank")
    rank = sched0.rank
    model = routing.model
    parallel = routing.parallel
    k_local = model.K // parallel.tp
    token_bytes = cost.token_bytes(model)

    tiles: List[Tile] = list(sched0.tiles) + list(sched1.tiles)
    n0 = len(sched0.tiles)
    tile_ns: List[int] = []
    for tile in sched0.tiles:
        tile_ns.append(cost.tile_ns(2.0 * len(tile.rows) * k_local * model.N))
    for tile in sched1.tiles:
        cols = tile.col_stop - tile.col_start
        tile_ns.append(cost.tile_ns(2.0 * len(tile.rows) * cols * k_local))

    # Inbound transfers in the order the tile schedule consumes them, so
    # delivery tracks demand.  Every received row is moved; rows sourced
    # inside this rank's TP replica group ride the local link.
    inbound: List[_CommTask] = []
    inbound_tile: List[int] = []
    tile_pending_arrivals = [0] * len(tiles)
    tile_arrival_sources: List[List[int]] = [[] for _ in range(len(tiles))]
    for tid, tile in enumerate(sched0.tiles):
        for token, src in tile.rows:
            remote = src != rank
            local_link = parallel.same_tp_group(src, rank)
            if remote:
                tile_pending_arrivals[tid] += 1
                tile_arrival_sources[tid].append(len(inbound))
            inbound.append(
                _CommTask(
                    nbytes=token_bytes,
                    ns=cost.msg_ns(token_bytes, local_link),
                    gated_tile=tid if remote else None,
                    chunk=None,
                )
            )
            inbound_tile.append(tid)

    # Producer -> consumer row dependencies between the two GEMMs.
    by_expert: Dict[int, List[Tuple[int, int, int]]] = {}
    for tid, tile in enumerate(sched0.tiles):
        by_expert.setdefault(tile.expert, []).append(
            (tile.row_start, tile.row_stop, tid)
        )
    tile_pending_tiles = [0] * len(tiles)
    tile_dependents: List[List[int]] = [[] for _ in range(len(tiles))]
    tile_producers: List[List[int]] = [[] for _ in range(len(tiles))]
    for idx, tile in enumerate(sched1.tiles):
        tid = n0 + idx
        for row_start, row_stop, producer in by_expert.get(tile.expert, ()):
            if row_start < tile.row_stop and tile.row_start < row_stop:
                tile_pending_tiles[tid] += 1
                tile_dependents[producer].append(tid)
                tile_producers[tid].append(producer)

    # Fine-grained combine traffic: one aggregated message per (reduce chunk,
    # destination source-rank) carrying that source's distinct tokens.
    tokens_by_src: Dict[int, Set[int]] = {}
    for rows in sched1.layout.values():
        for token, src in rows:
            tokens_by_src.setdefault(src, set()).add(token)
    dest_counts = sorted((src, len(tokens)) for src, tokens in tokens_by_src.items())

    outbound: List[_CommTask] = []
    chunk_pending = [0] * len(sched1.reduce_chunks)
    chunk_sends: List[List[int]] = [[] for _ in range(len(sched1.reduce_chunks))]
    tile_chunk: List[Optional[int]] = [None] * len(tiles)
    for chunk in sched1.reduce_chunks:
        chunk_pending[chunk.chunk_id] = len(chunk.prereq_tile_ids)
        for local_tid in chunk.prereq_tile_ids:
            tile_chunk[n0 + local_tid] = chunk.chunk_id
        cols = chunk.col_stop - chunk.col_start
        for dest, count in dest_counts:
            nbytes = count * cols * model.dtype_bytes
            chunk_sends[chunk.chunk_id].append(len(outbound))
            outbound.append(
                _CommTask(
                    nbytes=nbytes,
                    ns=cost.msg_ns(nbytes, dest == rank),
                    gated_tile=None,
                    chunk=chunk.chunk_id,
                )
            )

    return _TaskGraph(
        rank=rank,
        tiles=tiles,
        n_layer0=n0,
        tile_ns=tile_ns,
        inbound=inbound,
        inbound_tile=inbound_tile,
        outbound=outbound,
        tile_pending_arrivals=tile_pending_arrivals,
        tile_pending_tiles=tile_pending_tiles,
        tile_dependents=tile_dependents,
        tile_producers=tile_producers,
        tile_chunk=tile_chunk,
        chunk_pending=chunk_pending,
        chunk_sends=chunk_sends,
        tile_arrival_sources=tile_arrival_sources,
        tokens_by_src=tokens_by_src,
    )


def _validate_pair(
    sched0: TileSchedule, sched1: TileSchedule, routing: RoutingTable
) -> None:
    for sched in (sched0, sched1):
        violations = validate_schedule(sched, routing)
        if violations:
            raise ConfigurationError(
                f"invalid schedule for rank {sched.rank}: {violations[0].message}"
            )


def simulate_fine(
    sched0: TileSchedule,
    sched1: TileSchedule,
    routing: RoutingTable,
    cost: CostModel,
    split: KernelSplit,
    validate: bool = True,
) -> SimResult:
    """Event-driven simulation of the fused, block-specialized kernel.

    Compute blocks claim the earliest schedule-order tile whose dependencies
    are satisfied (remote arrivals for first-GEMM tiles, producer tiles for
    second-GEMM tiles).  Communication blocks serially drain their statically
    round-robin-assigned queues, stalling while the queue head (a combine
    send) is not yet ready.  Ties break toward smaller task id, then smaller
    block id, making the result fully deterministic.
    """
    if validate:
        _validate_pair(sched0, sched1, routing)
    graph = _build_task_graph(sched0, sched1, routing, cost)
    n_p, n_c = split.n_p, split.n_c

    comm_ns = [task.ns for task in graph.inbound] + [task.ns for task in graph.outbound]
    n_inbound = len(graph.inbound)
    n_comm = len(comm_ns)
    comm_queue: List[List[int]] = [[] for _ in range(n_c)]
    for comm_id in range(n_comm):
        comm_queue[comm_id % n_c].append(comm_id)
    queue_pos = [0] * n_c
    comm_ready = [comm_id < n_inbound for comm_id in range(n_comm)]
    comm_busy = [False] * n_c
    comm_start: Dict[int, int] = {}
    tile_start: Dict[int, int] = {}

    ready_tiles: List[int] = []
    for tid in range(len(graph.tiles)):
        pending = (
            graph.tile_pending_arrivals[tid]
            if tid < graph.n_layer0
            else graph.tile_pending_tiles[tid]
        )
        if pending == 0:
            heapq.heappush(ready_tiles, tid)
    idle_compute = list(range(n_p))
    heapq.heapify(idle_compute)

    intervals: List[Interval] = []
    events: List[Tuple[int, int, int, int, int]] = []  # (time, seq, kind, block, task)
    seq = 0
    EV_TILE, EV_COMM = 0, 1

    def start_comm(block: int, now: int) -> None:
        nonlocal seq
        if comm_busy[block] or queue_pos[block] >= len(comm_queue[block]):
            return
        head = comm_queue[block][queue_pos[block]]
        if not comm_ready[head]:
            return
        comm_busy[block] = True
        comm_start[head] = now
        heapq.heappush(events, (now + comm_ns[head], seq, EV_COMM, block, head))
        seq += 1

    def assign_compute(now: int) -> None:
        nonlocal seq
        while ready_tiles and idle_compute:
            tid = heapq.heappop(ready_tiles)
            block = heapq.heappop(idle_compute)
            tile_start[tid] = now
            heapq.heappush(events, (now + graph.tile_ns[tid], seq, EV_TILE, block, tid))
            seq += 1

    for block in range(n_c):
        start_comm(block, 0)
    if not events:
        assign_compute(0)

    while events:
        now = events[0][0]
        # Drain every completion at this timestamp, including cascades of
        # zero-duration transfers, before handing tiles to compute blocks:
        # a dependency satisfied "at t" is usable by work starting at t.
        while events and events[0][0] == now:
            touched: Set[int] = set()
            while events and events[0][0] == now:
                _t, _s, kind, block, task = heapq.heappop(events)
                if kind == EV_TILE:
                    intervals.append(
                        Interval(block, "compute", task, tile_start[task], now)
                    )
                    heapq.heappush(idle_compute, block)
                    for dependent in graph.tile_dependents[task]:
                        graph.tile_pending_tiles[dependent] -= 1
                        if graph.tile_pending_tiles[dependent] == 0:
                            heapq.heappush(ready_tiles, dependent)
                    chunk = graph.tile_chunk[task]
                    if chunk is not None:
                        graph.chunk_pending[chunk] -= 1
                        if graph.chunk_pending[chunk] == 0:
                            for send in graph.chunk_sends[chunk]:
                                send_id = n_inbound + send
                                comm_ready[send_id] = True
                                touched.add(send_id % n_c)
                else:
                    intervals.append(
                        Interval(n_p + block, "comm", task, comm_start[task], now)
                    )
                    comm_busy[block] = False
                    queue_pos[block] += 1
                    if task < n_inbound:
                        gated = graph.inbound[task].gated_tile
                        if gated is not None:
                            graph.tile_pending_arrivals[gated] -= 1
                            if graph.tile_pending_arrivals[gated] == 0:
                                heapq.heappush(ready_tiles, gated)
                    touched.add(block)
            for block in sorted(touched):
                start_comm(block, now)
        assign_compute(now)

    return _finalize(
        mode="fine",
        n_p=n_p,
        n_c=n_c,
        intervals=intervals,
        tile_work=sum(graph.tile_ns),
        comm_work=sum(comm_ns),
        compute_blocks=list(range(n_p)),
    )


def _finalize(
    mode: str,
    n_p: int,
    n_c: int,
    intervals: List[Interval],
    tile_work: int,
    comm_work: int,
    compute_blocks: List[int],
) -> SimResult:
    latency = max((iv.end_ns for iv in intervals), default=0)
    comm_spans = [
        (iv.start_ns, iv.end_ns) for iv in intervals if iv.block_kind == "comm"
    ]
    compute_spans = [
        (iv.start_ns, iv.end_ns) for iv in intervals if iv.block_kind == "compute"
    ]
    comm_union = _union_measure(comm_spans)
    exposed = _exposed_measure(comm_spans, compute_spans)
    hidden = 1.0 if comm_union == 0 else 1.0 - exposed / comm_union
    busy_per_block: Dict[int, int] = {b: 0 for b in compute_blocks}
    for iv in intervals:
        if iv.block_kind == "compute":
            busy_per_block[iv.block_id] = busy_per_block.get(iv.block_id, 0) + (
                iv.end_ns - iv.start_ns
            )
    bubbles = tuple((b, latency - busy) for b, busy in sorted(busy_per_block.items()))
    return SimResult(
        mode=mode,
        n_p=n_p,
        n_c=n_c,
        total_latency_ns=latency,
        intervals=tuple(intervals),
        comm_busy_ns=comm_union,
        compute_busy_ns=_union_measure(compute_spans),
        exposed_comm_ns=exposed,
        hidden_fraction=hidden,
        comm_work_ns=comm_work,
        compute_work_ns=tile_work,
        bubble_ns=bubbles,
    )


def _slice_bounds(total: int, chunks: int) -> List[Tuple[int, int]]:
    return [(total * k // chunks, total * (k + 1) // chunks) for k in range(chunks)]


def simulate_coarse(
    routing: RoutingTable,
    rank: int,
    cost: CostModel,
    chunks: int,
    meta0: Optional[SharedTensorMeta] = None,
    meta1: Optional[SharedTensorMeta] = None,
) -> SimResult:
    """Chunked recv -> compute -> send pipeline over the same rows and tiles.

    The first-GEMM tiles are split into ``chunks`` contiguous groups; chunk
    ``k`` receives its tiles' rows, then computes those rows through both
    GEMMs (plus ``chunk_overhead``), then sends the combine rows of every
    token whose last expert row finished in chunk ``k`` (one full-embedding
    message per destination).  Chunk ``k``'s compute waits for its own
    receives and for chunk ``k-1``'s compute; sends likewise serialize on the
    outbound channel.  ``chunks=1`` degenerates to sequential execution.
    """
    if chunks < 1:
        raise ConfigurationError(f"chunk count must be >= 1, got {chunks}")
    if meta0 is None:
        meta0 = meta_for_layer0(routing.model, routing.workload)
    if meta1 is None:
        meta1 = meta_for_layer1(routing.model, routing.workload)
    sched0 = resolve_layer0(routing, rank, meta0)
    sched1 = resolve_layer1(routing, rank, meta1)
    graph = _build_task_graph(sched0, sched1, routing, cost)
    model = routing.model
    n0 = graph.n_layer0
    overhead = cost.chunk_overhead_ns()

    # Group layer0 tiles; a layer1 tile joins the group of its last producer,
    # so each group is the complete two-GEMM processing of its rows.
    l0_bounds = _slice_bounds(n0, chunks)
    l0_group = [0] * n0
    for k, (lo, hi) in enumerate(l0_bounds):
        for tid in range(lo, hi):
            l0_group[tid] = k
    group_tiles: List[List[int]] = [[] for _ in range(chunks)]
    for tid in range(n0):
        group_tiles[l0_group[tid]].append(tid)
    tile_group = [0] * len(graph.tiles)
    for tid in range(n0):
        tile_group[tid] = l0_group[tid]
    for tid in range(n0, len(graph.tiles)):
        group = max(tile_group[p] for p in graph.tile_producers[tid])
        tile_group[tid] = group
        group_tiles[group].append(tid)

    group_rows: List[List[int]] = [[] for _ in range(chunks)]
    for comm_id, tid in enumerate(graph.inbound_tile):
        group_rows[tile_group[tid]].append(comm_id)

    # A token's combine row leaves with the group finishing its last row.
    token_group: Dict[Tuple[int, int], int] = {}
    for tid in range(n0):
        tile = graph.tiles[tid]
        for token, src in tile.rows:
            key = (src, token)
            token_group[key] = max(token_group.get(key, 0), tile_group[tid])
    send_counts: List[Dict[int, int]] = [dict() for _ in range(chunks)]
    for (src, _token), group in token_group.items():
        send_counts[group][src] = send_counts[group].get(src, 0) + 1

    BLOCK_IN, BLOCK_COMPUTE, BLOCK_OUT = 0, 1, 2
    intervals: List[Interval] = []
    send_task_id = 0
    in_cursor = compute_cursor = out_cursor = 0
    comm_work = 0
    for k in range(chunks):
        for comm_id in group_rows[k]:
            ns = graph.inbound[comm_id].ns
            intervals.append(
                Interval(BLOCK_IN, "comm", comm_id, in_cursor, in_cursor + ns)
            )
            in_cursor += ns
            comm_work += ns
        recv_end = in_cursor

        cursor = max(recv_end, compute_cursor)
        if overhead > 0:
            intervals.append(
                Interval(BLOCK_COMPUTE, "compute", -1, cursor, cursor + overhead)
            )
            cursor += overhead
        for tid in group_tiles[k]:
            intervals.append(
                Interval(BLOCK_COMPUTE, "compute", tid, cursor, cursor + graph.tile_ns[tid])
            )
            cursor += graph.tile_ns[tid]
        compute_cursor = cursor

        cursor = max(compute_cursor, out_cursor)
        for dest in sorted(send_counts[k]):
            nbytes = send_counts[k][dest] * model.N * model.dtype_bytes
            ns = cost.msg_ns(nbytes, dest == rank)
            intervals.append(
                Interval(
                    BLOCK_OUT,
                    "comm",
                    len(graph.inbound) + send_task_id,
                    cursor,
                    cursor + ns,
                )
            )
            cursor += ns
            comm_work += ns
            send_task_id += 1
        out_cursor = cursor

    mode = "sequential" if chunks == 1 else f"coarse:{chunks}"
    return _finalize(
        mode=mode,
        n_p=1,
        n_c=2,
        intervals=intervals,
        tile_work=sum(graph.tile_ns),
        comm_work=comm_work,
        compute_blocks=[BLOCK_COMPUTE],
    )


def latency_lower_bound(
    sched0: TileSchedule,
    sched1: TileSchedule,
    routing: RoutingTable,
    cost: CostModel,
    split: KernelSplit,
) -> int:
    """A latency any fine simulation must meet or exceed.

    Maximum of: total tile work spread over the compute blocks, the heaviest
    statically assigned communication queue, and the longest serial
    arrival -> first tile -> second tile -> send dependency chain.
    """
    graph = _build_task_graph(sched0, sched1, routing, cost)
    comm_ns = [task.ns for task in graph.inbound] + [task.ns for task in graph.outbound]
    bounds = [0]
    tile_work = sum(graph.tile_ns)
    if graph.tile_ns:
        bounds.append(-(-tile_work // split.n_p))
    queue_work = [0] * split.n_c
    for comm_id, ns in enumerate(comm_ns):
        queue_work[comm_id % split.n_c] += ns
    bounds.append(max(queue_work, default=0))

    chain0 = [0] * len(graph.tiles)
    for tid in range(graph.n_layer0):
        arrival = max(
            (graph.inbound[c].ns for c in graph.tile_arrival_sources[tid]), default=0
        )
        chain0[tid] = arrival + graph.tile_ns[tid]
        bounds.append(chain0[tid])
    chunk_chain: Dict[int, int] = {}
    for tid in range(graph.n_layer0, len(graph.tiles)):
        upstream = max((chain0[p] for p in graph.tile_producers[tid]), default=0)
        chain = upstream + graph.tile_ns[tid]
        bounds.append(chain)
        chunk = graph.tile_chunk[tid]
        if chunk is not None:
            chunk_chain[chunk] = max(chunk_chain.get(chunk, 0), chain)
    for chunk, upstream in chunk_chain.items():
        for send in graph.chunk_sends[chunk]:
            bounds.append(upstream + graph.outbound[send].ns)
    return max(bounds)


def audit_timeline(
    result: SimResult,
    sched0: TileSchedule,
    sched1: TileSchedule,
    routing: RoutingTable,
    cost: CostModel,
    split: KernelSplit,
) -> List[str]:
    """Post-hoc dependency-safety check of a fine-mode timeline.

    Verifies per-block interval exclusivity, that every tile starts only
    after its remote arrivals (and producer tiles) finish, that combine
    sends start only after their reduce chunk's tiles, and that busy time
    is conserved task for task.
    """
    graph = _build_task_graph(sched0, sched1, routing, cost)
    n_inbound = len(graph.inbound)
    comm_ns = [task.ns for task in graph.inbound] + [task.ns for task in graph.outbound]
    problems: List[str] = []

    per_block: Dict[int, List[Interval]] = {}
    for iv in result.intervals:
        per_block.setdefault(iv.block_id, []).append(iv)
    for block, ivs in sorted(per_block.items()):
        ordered = sorted(ivs, key=lambda iv: iv.start_ns)
        for a, b in zip(ordered, ordered[1:]):
            if b.start_ns < a.end_ns:
                problems.append(
                    f"block {block}: intervals [{a.start_ns},{a.end_ns}) and "
                    f"[{b.start_ns},{b.end_ns}) overlap"
                )

    tile_iv: Dict[int, Interval] = {}
    comm_iv: Dict[int, Interval] = {}
    for iv in result.intervals:
        if iv.task_id < 0:
            continue
        target = tile_iv if iv.block_kind == "compute" else comm_iv
        if iv.task_id in target:
            problems.append(f"{iv.block_kind} task {iv.task_id} appears twice")
        target[iv.task_id] = iv

    for tid in range(len(graph.tiles)):
        if tid not in tile_iv:
            problems.append(f"tile {tid} missing from the timeline")
    for comm_id in range(len(comm_ns)):
        if comm_id not in comm_iv:
            problems.append(f"transfer {comm_id} missing from the timeline")
    if problems:
        return problems

    for tid in range(graph.n_layer0):
        start = tile_iv[tid].start_ns
        for comm_id in graph.tile_arrival_sources[tid]:
            if comm_iv[comm_id].end_ns > start:
                problems.append(
                    f"tile {tid} started at {start} before arrival {comm_id} "
                    f"finished at {comm_iv[comm_id].end_ns}"
                )
    for producer in range(graph.n_layer0):
        for dependent in graph.tile_dependents[producer]:
            if tile_iv[dependent].start_ns < tile_iv[producer].end_ns:
                problems.append(
                    f"tile {dependent} started before its producer tile {producer} finished"
                )
    for chunk_id, sends in enumerate(graph.chunk_sends):
        tile_ids = [
            tid
            for tid in range(graph.n_layer0, len(graph.tiles))
            if graph.tile_chunk[tid] == chunk_id
        ]
        ready = max((tile_iv[tid].end_ns for tid in tile_ids), default=0)
        for send in sends:
            send_id = n_inbound + send
            if comm_iv[send_id].start_ns < ready:
                problems.append(
                    f"combine send {send_id} started before reduce chunk {chunk_id} was ready"
                )

    compute_sum = sum(iv.end_ns - iv.start_ns for iv in tile_iv.values())
    comm_sum = sum(iv.end_ns - iv.start_ns for iv in comm_iv.values())
    if compute_sum != sum(graph.tile_ns):
        problems.append("compute interval durations do not sum to the tile work")
    if comm_sum != sum(comm_ns):
        problems.append("comm interval durations do not sum to the message work")
    max_end = max((iv.end_ns for iv in result.intervals), default=0)
    if result.total_latency_ns != max_end:
        problems.append("total latency is not the maximum interval end")
    return problems
