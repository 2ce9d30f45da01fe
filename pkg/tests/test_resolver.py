"""Dependency-resolver tests: sorting, tiling, ordering, validation."""

from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from moepipe import (
    ConfigurationError,
    ModelConfig,
    ParallelSpec,
    RoutingTable,
    WorkloadSpec,
    build_routing,
    meta_for_layer0,
    meta_for_layer1,
    resolve_layer0,
    resolve_layer1,
    sort_tokens_by_source,
    validate_schedule,
)
from moepipe.resolver import ReduceChunk, SharedTensorMeta, M_DIM, N_DIM


def hand_routing(model, par, assignments):
    """Routing table with explicit per-token expert lists."""
    table = RoutingTable(
        model=model,
        parallel=par,
        workload=WorkloadSpec(M=len(assignments), seed=0, std=0.0),
        experts_per_token=tuple(tuple(sorted(a)) for a in assignments),
        achieved_std=0.0,
    )
    table.validate()
    return table


def random_instance(seed, max_m=64, e_choices=(1, 2, 3, 4, 8)):
    """Small random routed instance used across resolver property tests."""
    import numpy as np

    rng = np.random.default_rng(seed)
    e_count = int(rng.choice(e_choices))
    topk = int(rng.integers(1, e_count + 1))
    tp = int(rng.choice([1, 2]))
    ep_options = [d for d in (1, 2, 4) if e_count % d == 0]
    ep = int(rng.choice(ep_options))
    k_hidden = int(rng.choice([4, 8, 16])) * tp
    n_embed = int(rng.choice([4, 8, 16]))
    model = ModelConfig(L=1, E=e_count, topk=topk, N=n_embed, K=k_hidden)
    par = ParallelSpec(tp=tp, ep=ep)
    m_tokens = int(rng.integers(0, max_m + 1))
    from moepipe import max_achievable_std

    target = float(rng.uniform(0, max_achievable_std(e_count, topk)))
    wl = WorkloadSpec(M=m_tokens, seed=int(rng.integers(0, 2**31)), std=target)
    routing = build_routing(model, par, wl)
    tile_rows = int(rng.choice([1, 2, 4, 8]))
    tile_cols = int(rng.integers(1, n_embed + 1))
    meta0 = meta_for_layer0(model, wl, tile_rows)
    meta1 = meta_for_layer1(model, wl, tile_rows, tile_cols)
    rank = int(rng.integers(0, par.world_size))
    return routing, rank, meta0, meta1


# ---------------------------------------------------------------------------
# sort_tokens_by_source
# ---------------------------------------------------------------------------


def test_sort_single_rank_identity():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=16, seed=1))
    layout = sort_tokens_by_source(routing, 0)
    for rows in layout.values():
        tokens = [t for t, _src in rows]
        assert tokens == sorted(tokens)
        assert all(src == 0 for _t, src in rows)


def test_sort_local_tokens_first_three_experts():
    # Three experts hosted on rank 0, each with a mix of local and remote rows.
    model = ModelConfig(L=1, E=3, topk=2, N=4, K=4)
    par = ParallelSpec(tp=2, ep=1)  # W=2, both ranks host all three experts
    assignments = [(0, 1), (1, 2), (0, 2), (0, 1), (1, 2), (0, 2)]
    routing = hand_routing(model, par, assignments)
    layout = sort_tokens_by_source(routing, 0)
    assert set(layout) == {0, 1, 2}
    for rows in layout.values():
        sources = [src for _t, src in rows]
        first_remote = next((i for i, s in enumerate(sources) if s != 0), len(sources))
        assert all(s != 0 for s in sources[first_remote:])
        assert 0 < first_remote < len(sources)  # genuinely mixed

def test_sort_brute_force_oracle():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    par = ParallelSpec(tp=1, ep=2)
    routing = build_routing(model, par, WorkloadSpec(M=8, seed=7))
    for rank in (0, 1):
        layout = sort_tokens_by_source(routing, rank)
        for expert, rows in layout.items():
            triples = sorted(
                ((routing.source_rank_of(t) - rank) % 2, t)
                for t, experts in enumerate(routing.experts_per_token)
                if expert in experts
            )
            assert [(t, (d + rank) % 2 if False else routing.source_rank_of(t)) for d, t in triples] == list(rows)


def test_sort_rank_out_of_range():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=4, seed=0))
    with pytest.raises(ConfigurationError):
        sort_tokens_by_source(routing, 1)


# ---------------------------------------------------------------------------
# resolve_layer0
# ---------------------------------------------------------------------------


def test_layer0_single_rank_all_local():
    model = ModelConfig(L=1, E=3, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=20, seed=2))
    sched = resolve_layer0(routing, 0, meta_for_layer0(model, routing.workload, 4))
    assert all(not tile.deps for tile in sched.tiles)
    order = [(t.expert, t.row_start) for t in sched.tiles]
    assert order == sorted(order)


def test_layer0_hand_two_tiles():
    # One expert fed by 4 local then 4 remote tokens, tiled by 4 rows.
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    par = ParallelSpec(tp=1, ep=2)
    routing = hand_routing(model, par, [(0,)] * 8)
    sched = resolve_layer0(routing, 0, meta_for_layer0(model, routing.workload, 4))
    assert len(sched.tiles) == 2
    first, second = sched.tiles
    assert first.deps == frozenset()
    assert first.rows == ((0, 0), (1, 0), (2, 0), (3, 0))
    assert second.deps == frozenset({(4, 1), (5, 1), (6, 1), (7, 1)})


def test_layer0_local_tiles_scheduled_first():
    model = ModelConfig(L=1, E=3, topk=2, N=4, K=4)
    par = ParallelSpec(tp=2, ep=1)
    assignments = [(0, 1), (1, 2), (0, 2), (0, 1), (1, 2), (0, 2), (0, 1), (1, 2)]
    routing = hand_routing(model, par, assignments)
    sched = resolve_layer0(routing, 0, meta_for_layer0(model, routing.workload, 2))
    dep_counts = [len(t.deps) for t in sched.tiles]
    assert dep_counts == sorted(dep_counts)
    assert dep_counts[0] == 0


def test_layer0_rejects_column_decomposition():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=8, seed=0))
    bad_meta = SharedTensorMeta(global_rows=8, cols=4, decomposed_dim=N_DIM, tile_cols=2)
    with pytest.raises(ConfigurationError):
        resolve_layer0(routing, 0, bad_meta)


def test_layer0_empty_expert_produces_no_tiles():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    routing = hand_routing(model, ParallelSpec(), [(0,)] * 5)
    sched = resolve_layer0(routing, 0, meta_for_layer0(model, routing.workload, 4))
    assert {t.expert for t in sched.tiles} == {0}
    assert [len(t.rows) for t in sched.tiles] == [4, 1]  # ragged tail


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_layer0_prefix_locality_property(seed):
    routing, rank, meta0, _meta1 = random_instance(seed)
    sched = resolve_layer0(routing, rank, meta0)
    dep_counts = [len(t.deps) for t in sched.tiles]
    assert dep_counts == sorted(dep_counts)
    assert validate_schedule(sched, routing) == []


# ---------------------------------------------------------------------------
# resolve_layer1
# ---------------------------------------------------------------------------


def test_layer1_column_major_order():
    model = ModelConfig(L=1, E=2, topk=2, N=4, K=4)
    routing = hand_routing(model, ParallelSpec(), [(0, 1)] * 3)
    meta = meta_for_layer1(model, routing.workload, tile_rows=8, tile_cols=2)
    sched = resolve_layer1(routing, 0, meta)
    order = [(t.expert, t.col_start) for t in sched.tiles]
    assert order == [(0, 0), (1, 0), (0, 2), (1, 2)]
    assert [c.chunk_id for c in sched.reduce_chunks] == [0, 1]
    assert sched.reduce_chunks[0].prereq_tile_ids == frozenset({0, 1})
    assert sched.reduce_chunks[1].prereq_tile_ids == frozenset({2, 3})


def test_layer1_single_column_block_degenerates():
    model = ModelConfig(L=1, E=3, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=9, seed=3))
    meta = meta_for_layer1(model, routing.workload, tile_rows=16, tile_cols=4)
    sched = resolve_layer1(routing, 0, meta)
    assert len(sched.reduce_chunks) == 1
    experts = [t.expert for t in sched.tiles]
    assert experts == sorted(experts)


def test_layer1_four_waves_three_experts():
    # Every token on all three experts; four column blocks = four waves.
    model = ModelConfig(L=1, E=3, topk=3, N=8, K=4)
    routing = hand_routing(model, ParallelSpec(), [(0, 1, 2)] * 4)
    meta = meta_for_layer1(model, routing.workload, tile_rows=8, tile_cols=2)
    sched = resolve_layer1(routing, 0, meta)
    assert meta.col_blocks() == 4
    wave_of = {t.tile_id: t.col_start // 2 for t in sched.tiles}
    waves = [wave_of[t.tile_id] for t in sched.tiles]
    assert waves == sorted(waves)
    assert len(sched.reduce_chunks) == 4
    for chunk in sched.reduce_chunks:
        members = {t.tile_id for t in sched.tiles if t.col_start == chunk.col_start}
        assert chunk.prereq_tile_ids == members
        assert {t.expert for t in sched.tiles if t.tile_id in members} == {0, 1, 2}


def test_layer1_rejects_row_decomposition():
    model = ModelConfig(L=1, E=2, topk=1, N=4, K=4)
    routing = build_routing(model, ParallelSpec(), WorkloadSpec(M=8, seed=0))
    with pytest.raises(ConfigurationError):
        resolve_layer1(routing, 0, meta_for_layer0(model, routing.workload))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_layer1_wave_property(seed):
    routing, rank, _meta0, meta1 = random_instance(seed)
    sched = resolve_layer1(routing, rank, meta1)
    blocks = [t.col_start for t in sched.tiles]
    assert blocks == sorted(blocks)
    assert [c.chunk_id for c in sched.reduce_chunks] == sorted(
        c.chunk_id for c in sched.reduce_chunks
    )
    assert validate_schedule(sched, routing) == []


# ---------------------------------------------------------------------------
# validate_schedule
# ---------------------------------------------------------------------------


def valid_pair(seed=123):
    routing, rank, meta0, meta1 = random_instance(seed, max_m=40)
    sched0 = resolve_layer0(routing, rank, meta0)
    if not sched0.tiles:
        return valid_pair(seed + 1)
    sched1 = resolve_layer1(routing, rank, meta1)
    return routing, sched0, sched1


def test_validator_clean_on_resolver_output():
    routing, sched0, sched1 = valid_pair()
    assert validate_schedule(sched0, routing) == []
    assert validate_schedule(sched1, routing) == []


def test_validator_missing_tile():
    routing, sched0, _ = valid_pair()
    mutated = replace(sched0, tiles=sched0.tiles[1:])
    codes = {v.code for v in validate_schedule(mutated, routing)}
    assert "missing-tile" in codes


def test_validator_duplicate_tile():
    routing, sched0, _ = valid_pair()
    mutated = replace(sched0, tiles=sched0.tiles + (sched0.tiles[0],))
    codes = {v.code for v in validate_schedule(mutated, routing)}
    assert "duplicate-tile" in codes


def test_validator_corrupt_deps():
    routing, sched0, _ = valid_pair()
    victim = sched0.tiles[0]
    corrupted = replace(victim, deps=victim.deps | {(victim.rows[0][0], 999)})
    mutated = replace(sched0, tiles=(corrupted,) + sched0.tiles[1:])
    codes = {v.code for v in validate_schedule(mutated, routing)}
    assert "bad-deps" in codes


def test_validator_premature_reduce():
    routing, _, sched1 = valid_pair()
    chunk = sched1.reduce_chunks[0]
    if not chunk.prereq_tile_ids:
        pytest.skip("degenerate chunk")
    starved = ReduceChunk(
        chunk_id=chunk.chunk_id,
        col_start=chunk.col_start,
        col_stop=chunk.col_stop,
        prereq_tile_ids=frozenset(list(chunk.prereq_tile_ids)[1:]),
    )
    mutated = replace(sched1, reduce_chunks=(starved,) + sched1.reduce_chunks[1:])
    codes = {v.code for v in validate_schedule(mutated, routing)}
    assert "premature-reduce" in codes


def test_validator_reduce_order():
    routing, _, sched1 = valid_pair()
    if len(sched1.reduce_chunks) < 2:
        pytest.skip("needs two chunks")
    swapped = (sched1.reduce_chunks[1], sched1.reduce_chunks[0]) + sched1.reduce_chunks[2:]
    mutated = replace(sched1, reduce_chunks=swapped)
    codes = {v.code for v in validate_schedule(mutated, routing)}
    assert "reduce-order" in codes


def test_schedule_json_shape():
    routing, sched0, sched1 = valid_pair()
    data = sched0.to_json_dict()
    assert set(data) == {"rank", "layer", "tile_rows", "tile_cols", "tiles", "reduce_chunks"}
    for tile in data["tiles"]:
        assert set(tile) == {"tile_id", "expert", "rows", "cols", "deps"}
    assert sched1.to_json_dict()["reduce_chunks"]
